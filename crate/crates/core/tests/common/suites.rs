//! Check suites shared by the focused test targets and the acceptance gate.
//! Each returns named measurements; callers decide the thresholds.

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;

use unblur::cycle::loss::{
    cycle_loss, l1, lsgan_discriminator, lsgan_generator, stage1_total, stage2_total, wave_generator, wave_objective,
};
use unblur::cycle::wavelet::{dwt, high_freq, idwt};
use unblur::deblur::{BlockConfig, FmMsa, TmFfn, TtformerBlock};
use unblur::diffusion::{
    denoise_step, diffuse_with, reverse_step, Denoiser, DiffusionSchedule, NoiseSource,
};
use unblur::eval::{psnr, ssim_with, SsimParams};
use unblur::nn::layers::softmax_last;
use unblur::nn::ops::adaptive_filter;
use unblur::nn::{Linear, ParamStore};
use unblur::tpe::{enhance_memory, soft_transfer, transfer_texture};
use unblur::FeatureMap;

use super::*;

pub const CASES: usize = 100;

/// Largest absolute error of each library routine against its brute-force
/// reference over [`CASES`] random f64 instances.
pub fn oracle_errors(seed: u64) -> Vec<(&'static str, f64)> {
    vec![
        ("texture memory enhancement", tpe_enhancement(seed)),
        ("texture selection", tpe_selection(seed + 1)),
        ("adaptive filter", adaptive_filtering(seed + 2)),
        ("forward diffusion", forward_diffusion(seed + 3)),
        ("reverse step", reverse_diffusion(seed + 4)),
        ("haar transform", haar(seed + 5)),
        ("psnr", psnr_cases(seed + 6)),
        ("ssim", ssim_cases(seed + 7)),
    ]
}

fn tpe_enhancement(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..CASES {
        let (n, t, l) = (r.random_range(1..7), r.random_range(1..10), r.random_range(1..6));
        let mem = uniform(&mut r, n * l, -2.0, 2.0);
        let tok = uniform(&mut r, t * l, -2.0, 2.0);
        let wt = uniform(&mut r, l * l, -1.0, 1.0);
        let bias = uniform(&mut r, l, -1.0, 1.0);
        let fc = Linear::from_tensors(tensor(&wt, &[l, l]), tensor(&bias, &[l]));
        let (enh, attn) = enhance_memory(&tensor(&mem, &[n, l]), &fc, &tensor(&tok, &[t, l])).unwrap();
        let (want_enh, want_attn) = enhance_oracle(&mem, &tok, &wt, &bias, n, t, l);
        worst = worst.max(max_abs_diff(&flat(&enh), &want_enh));
        worst = worst.max(max_abs_diff(&flat(&attn), &want_attn));
    }
    worst
}

fn tpe_selection(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..CASES {
        let (n, t, l) = (r.random_range(1..9), r.random_range(1..10), r.random_range(1..6));
        let enh = uniform(&mut r, n * l, -2.0, 2.0);
        let tok = uniform(&mut r, t * l, -2.0, 2.0);
        let got = transfer_texture(&tensor(&tok, &[t, l]), &tensor(&enh, &[n, l])).unwrap();
        let (idx, rows) = select_oracle(&tok, &enh, t, n, l);
        if got.indices != idx {
            return f64::INFINITY;
        }
        worst = worst.max(max_abs_diff(&flat(&got.tokens), &rows));
    }
    worst
}

fn adaptive_filtering(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..CASES {
        let (n, c, h, w) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..7), r.random_range(1..7));
        let k = [1, 3, 5][r.random_range(0..3)];
        let x = uniform(&mut r, n * c * h * w, -1.0, 1.0);
        let off = uniform(&mut r, n * 2 * k * k * h * w, -2.5, 2.5);
        let m = uniform(&mut r, n * k * k * h * w, -1.0, 1.0);
        let got = adaptive_filter(
            &tensor(&x, &[n, c, h, w]),
            &tensor(&off, &[n, 2 * k * k, h, w]),
            &tensor(&m, &[n, k * k, h, w]),
        )
        .unwrap();
        worst = worst.max(max_abs_diff(&flat(&got), &adaptive_filter_oracle(&x, &off, &m, n, c, h, w, k)));
    }
    worst
}

fn random_schedule(r: &mut rand_chacha::ChaCha8Rng) -> DiffusionSchedule {
    let steps = r.random_range(1..12);
    DiffusionSchedule::from_betas(uniform(r, steps, 1e-3, 0.6)).unwrap()
}

fn forward_diffusion(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..CASES {
        let sched = random_schedule(&mut r);
        let t = r.random_range(1..=sched.steps());
        let len = r.random_range(1..20);
        let z = uniform(&mut r, len, -3.0, 3.0);
        let eps = uniform(&mut r, len, -3.0, 3.0);
        let got = diffuse_with(&tensor(&z, &[len]), &sched, t, &tensor(&eps, &[len])).unwrap();
        worst = worst.max(max_abs_diff(&flat(&got), &diffuse_oracle(&z, &eps, sched.betas(), t)));
    }
    worst
}

fn reverse_diffusion(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for case in 0..CASES {
        let sched = random_schedule(&mut r);
        let t = r.random_range(1..=sched.steps());
        let len = r.random_range(1..20);
        let z = uniform(&mut r, len, -3.0, 3.0);
        let eps = uniform(&mut r, len, -3.0, 3.0);
        let noise = uniform(&mut r, len, -3.0, 3.0);
        let with_noise = case % 2 == 0;
        let nt = tensor(&noise, &[len]);
        let got = reverse_step(&tensor(&z, &[len]), &tensor(&eps, &[len]), t, &sched, with_noise.then_some(&nt)).unwrap();
        let want = reverse_oracle(&z, &eps, with_noise.then_some(noise.as_slice()), sched.betas(), t);
        // relative, since small ᾱ amplifies the values
        let scale = want.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        worst = worst.max(max_abs_diff(&flat(&got), &want) / scale);
    }
    worst
}

fn haar(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..CASES {
        let (n, c) = (r.random_range(1..3), r.random_range(1..4));
        let (h, w) = (2 * r.random_range(1..5), 2 * r.random_range(1..5));
        let x = uniform(&mut r, n * c * h * w, -1.0, 1.0);
        let xt = tensor(&x, &[n, c, h, w]);
        let bands = dwt(&xt).unwrap();
        let got = [flat(&bands.ll), flat(&bands.lh), flat(&bands.hl), flat(&bands.hh)];
        let q = h * w / 4;
        for p in 0..n * c {
            let want = haar_oracle(&x[p * h * w..(p + 1) * h * w], h, w);
            for (g, wv) in got.iter().zip(&want) {
                worst = worst.max(max_abs_diff(&g[p * q..(p + 1) * q], wv));
            }
        }
        worst = worst.max(max_abs_diff(&flat(&idwt(&bands).unwrap()), &x));
    }
    worst
}

fn random_map(r: &mut rand_chacha::ChaCha8Rng, h: usize, w: usize, c: usize) -> FeatureMap {
    let v: Vec<f32> = (0..h * w * c).map(|_| r.random_range(0.0f32..1.0)).collect();
    FeatureMap::from_vec(h, w, c, v).unwrap()
}

fn as_f64(m: &FeatureMap) -> Vec<f64> {
    m.data().iter().map(|v| *v as f64).collect()
}

fn psnr_cases(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..CASES {
        let (h, w, c) = (r.random_range(1..9), r.random_range(1..9), r.random_range(1..4));
        let a = random_map(&mut r, h, w, c);
        let b = random_map(&mut r, h, w, c);
        let peak = r.random_range(0.5..2.0);
        worst = worst.max((psnr(&a, &b, peak).unwrap() - psnr_oracle(&as_f64(&a), &as_f64(&b), peak)).abs());
    }
    worst
}

fn ssim_cases(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..CASES {
        let window = [3, 5, 7][r.random_range(0..3)];
        let (h, w, c) = (r.random_range(window..12), r.random_range(window..12), r.random_range(1..4));
        let a = random_map(&mut r, h, w, c);
        let mut b = a.clone();
        // partially correlated second image
        for v in b.data_mut() {
            *v = (*v * 0.7 + r.random_range(0.0f32..0.3)).min(1.0);
        }
        let p = SsimParams {
            window,
            sigma: r.random_range(0.5..2.0),
            ..SsimParams::default()
        };
        let got = ssim_with(&a, &b, &p).unwrap();
        let want = ssim_oracle(&as_f64(&a), &as_f64(&b), h, w, c, window, p.sigma, p.peak);
        worst = worst.max((got - want).abs());
    }
    worst
}

// ---------------------------------------------------------------------------
// Gradients.

const FD_STEP: f64 = 1e-5;
const PROBES_PER_VAR: usize = 12;

fn scalar_of(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// Weighted sum `Σ R ⊙ out` with a fixed projection, so every output
/// element contributes to the checked gradient.
pub fn project(out: &Tensor, seed: u64) -> Tensor {
    let n = out.elem_count();
    let r = uniform(&mut rng(seed), n, -1.0, 1.0);
    (out * tensor(&r, out.dims()).to_dtype(out.dtype()).unwrap()).unwrap().sum_all().unwrap()
}

/// Worst relative error between autograd and central differences over a
/// random subset of entries of every variable.
pub fn grad_check(vars: &[Var], seed: u64, mut loss: impl FnMut() -> Tensor) -> f64 {
    let grads = loss().backward().unwrap();
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for var in vars {
        let analytic = grads
            .get(var.as_tensor())
            .map(flat)
            .unwrap_or_else(|| vec![0.0; var.elem_count()]);
        let base = flat(var.as_tensor());
        let count = base.len();
        let picks: Vec<usize> = if count <= PROBES_PER_VAR {
            (0..count).collect()
        } else {
            (0..PROBES_PER_VAR).map(|_| r.random_range(0..count)).collect()
        };
        let mut numeric = Vec::with_capacity(picks.len());
        let mut probe = base.clone();
        for &i in &picks {
            let mut eval = |v: f64, probe: &mut Vec<f64>| {
                probe[i] = v;
                var.set(&tensor(probe, var.dims())).unwrap();
                scalar_of(&loss())
            };
            let up = eval(base[i] + FD_STEP, &mut probe);
            let down = eval(base[i] - FD_STEP, &mut probe);
            probe[i] = base[i];
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        var.set(&tensor(&base, var.dims())).unwrap();
        let picked: Vec<f64> = picks.iter().map(|&i| analytic[i]).collect();
        worst = worst.max(rel_error(&picked, &numeric));
    }
    worst
}

fn var(r: &mut rand_chacha::ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Var {
    let n = shape.iter().product();
    Var::from_tensor(&tensor(&uniform(r, n, lo, hi), shape)).unwrap()
}

/// Replaces every parameter with uniform noise of the given half-width.
pub fn randomize(store: &ParamStore, seed: u64, width: f64) {
    let mut r = rng(seed);
    for (name, v) in store.vars() {
        let vals = uniform(&mut r, v.elem_count(), -width, width);
        store.assign(name, &tensor(&vals, v.dims())).unwrap();
    }
}

fn store_vars(store: &ParamStore) -> Vec<Var> {
    store.vars().values().cloned().collect()
}

pub fn small_block(seed: u64) -> (ParamStore, TtformerBlock) {
    let mut store = ParamStore::new(DType::F64, seed);
    let block = TtformerBlock::new(
        &mut store.root(),
        BlockConfig {
            channels: 4,
            heads: 2,
            kernel: 3,
            ffn_expansion: 1.0,
            stack_ratio: 0.5,
        },
    )
    .unwrap();
    (store, block)
}

/// Relative error of analytic against numeric gradients, per component.
pub fn gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut r = rng(seed);

    // one prior-modulated transformer block, inputs and all parameters
    let (store, block) = small_block(seed);
    randomize(&store, seed + 1, 0.5);
    let f = var(&mut r, &[1, 4, 6, 6], -1.0, 1.0);
    let z = var(&mut r, &[1, 4, 6, 6], -1.0, 1.0);
    let mut vars = vec![f.clone(), z.clone()];
    vars.extend(store_vars(&store));
    out.push((
        "transformer block",
        grad_check(&vars, seed + 2, || project(&block.forward(f.as_tensor(), Some(z.as_tensor())).unwrap(), seed + 3)),
    ));

    // straight-through transfer: gradients must be those of the soft surrogate
    let (n, t, l) = (5, 6, 3);
    let mem = var(&mut r, &[n, l], -1.0, 1.0);
    let sharp = var(&mut r, &[t, l], -1.0, 1.0);
    let blurry = var(&mut r, &[t, l], -1.0, 1.0);
    let fw = var(&mut r, &[l, l], -1.0, 1.0);
    let fb = var(&mut r, &[l], -1.0, 1.0);
    let fc = Linear::from_tensors(fw.as_tensor().clone(), fb.as_tensor().clone());
    let vars = vec![mem.clone(), sharp.clone(), blurry.clone(), fw.clone(), fb.clone()];
    let enhanced = || enhance_memory(mem.as_tensor(), &fc, sharp.as_tensor()).unwrap().0;
    let analytic = project(&transfer_texture(blurry.as_tensor(), &enhanced()).unwrap().tokens, seed + 4)
        .backward()
        .unwrap();
    let mut worst = 0.0f64;
    for v in &vars {
        let a = flat(analytic.get(v.as_tensor()).unwrap());
        let base = flat(v.as_tensor());
        let numeric = numeric_grad(&base, FD_STEP, |x| {
            v.set(&tensor(x, v.dims())).unwrap();
            scalar_of(&project(&soft_transfer(blurry.as_tensor(), &enhanced()).unwrap(), seed + 4))
        });
        v.set(&tensor(&base, v.dims())).unwrap();
        worst = worst.max(rel_error(&a, &numeric));
    }
    out.push(("texture straight-through", worst));

    // denoiser, through one reverse step
    let mut store = ParamStore::new(DType::F64, seed + 5);
    let den = Denoiser::new(&mut store.root(), 4, 8, 2).unwrap();
    let sched = DiffusionSchedule::linear(8, 0.1, 0.9).unwrap();
    let zt = var(&mut r, &[1, 4, 4, 4], -1.0, 1.0);
    let c = var(&mut r, &[1, 4, 4, 4], -1.0, 1.0);
    let noise = tensor(&uniform(&mut r, 64, -1.0, 1.0), &[1, 4, 4, 4]);
    let mut vars = vec![zt.clone(), c.clone()];
    vars.extend(store_vars(&store));
    out.push((
        "denoiser",
        grad_check(&vars, seed + 6, || {
            project(&denoise_step(zt.as_tensor(), c.as_tensor(), 5, &sched, &den, Some(&noise)).unwrap(), seed + 7)
        }),
    ));

    // loss terms
    let a = var(&mut r, &[2, 3, 4, 4], 0.0, 1.0);
    let b = var(&mut r, &[2, 3, 4, 4], 0.0, 1.0);
    let c2 = var(&mut r, &[2, 3, 4, 4], 0.0, 1.0);
    let d = var(&mut r, &[2, 3, 4, 4], 0.0, 1.0);
    let p = var(&mut r, &[2, 1, 2, 2], 0.05, 0.95);
    let q = var(&mut r, &[2, 1, 2, 2], 0.05, 0.95);
    out.push(("l1", grad_check(&[a.clone(), b.clone()], seed + 8, || l1(a.as_tensor(), b.as_tensor()).unwrap())));
    out.push(("cycle", grad_check(&[a.clone(), b.clone(), c2.clone(), d.clone()], seed + 9, || {
        cycle_loss(a.as_tensor(), b.as_tensor(), c2.as_tensor(), d.as_tensor()).unwrap()
    })));
    out.push(("lsgan generator", grad_check(&[p.clone()], seed + 10, || lsgan_generator(p.as_tensor()).unwrap())));
    out.push(("lsgan discriminator", grad_check(&[p.clone(), q.clone()], seed + 11, || {
        lsgan_discriminator(p.as_tensor(), q.as_tensor()).unwrap()
    })));
    out.push(("wave discriminator", grad_check(&[p.clone(), q.clone()], seed + 12, || {
        wave_objective(p.as_tensor(), q.as_tensor()).unwrap()
    })));
    out.push(("wave generator", grad_check(&[a.clone()], seed + 13, || {
        let prob = candle_nn::ops::sigmoid(&high_freq(a.as_tensor()).unwrap()).unwrap();
        wave_generator(&prob).unwrap()
    })));
    let (g, y, w) = (var(&mut r, &[], 0.5, 2.0), var(&mut r, &[], 0.5, 2.0), var(&mut r, &[], 0.5, 2.0));
    let weights = unblur::cycle::LossWeights::default();
    out.push(("weighted totals", grad_check(&[g.clone(), y.clone(), w.clone(), a.clone(), b.clone()], seed + 14, || {
        let s1 = stage1_total(g.as_tensor(), y.as_tensor(), w.as_tensor(), &weights).unwrap();
        stage2_total(&s1, a.as_tensor(), b.as_tensor(), &weights).unwrap()
    })));
    out
}

// ---------------------------------------------------------------------------
// Invariant sweeps.

/// Largest deviation of a softmax row sum from one, over plain softmax,
/// memory attention and block attention maps.
pub fn softmax_deviation(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let row_sums = |t: &Tensor| -> Vec<f64> { flat(&t.sum_keepdim(t.rank() - 1).unwrap()) };
    for _ in 0..CASES {
        let (rows, cols) = (r.random_range(1..6), r.random_range(1..9));
        let scale = [1.0, 30.0, 300.0][r.random_range(0..3)];
        let x = tensor(&uniform(&mut r, rows * cols, -scale, scale), &[rows, cols]);
        for s in row_sums(&softmax_last(&x).unwrap()) {
            worst = worst.max((s - 1.0).abs());
        }
    }
    let fc = Linear::from_tensors(tensor(&uniform(&mut r, 9, -1.0, 1.0), &[3, 3]), tensor(&[0.0; 3], &[3]));
    let mem = tensor(&uniform(&mut r, 15, -5.0, 5.0), &[5, 3]);
    let tok = tensor(&uniform(&mut r, 21, -5.0, 5.0), &[7, 3]);
    for s in row_sums(&enhance_memory(&mem, &fc, &tok).unwrap().1) {
        worst = worst.max((s - 1.0).abs());
    }
    let (store, block) = small_block(seed);
    randomize(&store, seed, 1.0);
    let f = tensor(&uniform(&mut r, 4 * 36, -1.0, 1.0), &[1, 4, 6, 6]);
    let z = tensor(&uniform(&mut r, 4 * 36, -1.0, 1.0), &[1, 4, 6, 6]);
    for s in row_sums(&block.attn.attention(&f, Some(&z)).unwrap()) {
        worst = worst.max((s - 1.0).abs());
    }
    worst
}

fn zero_params(store: &ParamStore, prefix: &str) {
    for (name, v) in store.vars() {
        if name.starts_with(prefix) {
            store.assign(name, &Tensor::zeros(v.dims(), DType::F64, &Device::Cpu).unwrap()).unwrap();
        }
    }
}

/// Residual branches with zeroed output projections must pass the input
/// through unchanged; returns the largest deviation.
pub fn residual_identity(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for case in 0..10 {
        let mut store = ParamStore::new(DType::F64, seed + case);
        let attn = FmMsa::new(&mut store.root().pp("attn"), 4, 2, 3, 0.5).unwrap();
        let ffn = TmFfn::new(&mut store.root().pp("ffn"), 4, 1.5, 0.5).unwrap();
        randomize(&store, seed + case, 1.0);
        zero_params(&store, "attn.project.");
        zero_params(&store, "ffn.out.");
        let f = tensor(&uniform(&mut r, 4 * 25, -2.0, 2.0), &[1, 4, 5, 5]);
        let z = tensor(&uniform(&mut r, 4 * 25, -2.0, 2.0), &[1, 4, 5, 5]);
        for prior in [None, Some(&z)] {
            worst = worst.max(max_abs_diff(&flat(&attn.forward(&f, prior).unwrap()), &flat(&f)));
            worst = worst.max(max_abs_diff(&flat(&ffn.forward(&f, prior).unwrap()), &flat(&f)));
        }
    }
    worst
}

/// Largest reconstruction error of the Haar pair over 100 random f32 images.
pub fn haar_reconstruction(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..CASES {
        let (h, w) = (2 * r.random_range(1..17), 2 * r.random_range(1..17));
        let v: Vec<f32> = (0..3 * h * w).map(|_| r.random_range(0.0f32..1.0)).collect();
        let x = Tensor::from_vec(v, (1, 3, h, w), &Device::Cpu).unwrap();
        let back = idwt(&dwt(&x).unwrap()).unwrap();
        worst = worst.max(max_abs_diff(&flat(&back), &flat(&x)));
    }
    worst
}

pub const MARGINAL_SAMPLES: usize = 10_000;

/// For each schedule: the standardized deviation of the sample mean and the
/// sample variance of `q(z_t | z)` at `t = T` from their exact values.
pub fn diffusion_marginals(seed: u64) -> Vec<(String, f64, f64)> {
    let schedules = [
        ("linear 0.1-0.9, T=8", DiffusionSchedule::linear(8, 0.1, 0.9).unwrap()),
        ("linear 1e-4-0.02, T=1000", DiffusionSchedule::linear(1000, 1e-4, 0.02).unwrap()),
        ("short, T=3", DiffusionSchedule::from_betas(vec![0.02, 0.05, 0.1]).unwrap()),
    ];
    let n = MARGINAL_SAMPLES as f64;
    schedules
        .into_iter()
        .enumerate()
        .map(|(i, (name, sched))| {
            let z0 = 0.7;
            let z = Tensor::full(z0, MARGINAL_SAMPLES, &Device::Cpu).unwrap();
            let eps = NoiseSource::new(seed + i as u64)
                .sample(&[MARGINAL_SAMPLES], DType::F64, &Device::Cpu)
                .unwrap();
            let x = flat(&diffuse_with(&z, &sched, sched.steps(), &eps).unwrap());
            let ab = sched.alpha_bar(sched.steps());
            let (mu, var) = (ab.sqrt() * z0, 1.0 - ab);
            let mean = x.iter().sum::<f64>() / n;
            let s2 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let mean_z = (mean - mu) / (var / n).sqrt();
            let var_z = (s2 - var) / (var * (2.0 / (n - 1.0)).sqrt());
            (name.to_string(), mean_z, var_z)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Tiny end-to-end configuration.

/// A configuration small enough for many training steps in a test.
pub fn tiny_config() -> unblur::Config {
    let mut cfg = unblur::Config::desk();
    cfg.apply_overrides(&[
        "deblur.base_channels=4",
        "deblur.blocks=1,1,1,1",
        "deblur.heads=1,1,1,1",
        "prior.channels=4",
        "prior.memory_size=8",
        "reblur.channels=4",
        "disc.channels=4",
        "diffusion.blocks=1",
        "train.patch=16",
        "train.flips=false",
        "data.count=10",
        "data.size=24",
        "data.kernel_size=5",
        "data.holdout=2",
        "train.checkpoint_every=1000",
    ])
    .unwrap();
    cfg
}

/// Runs every pipeline stage twice with the same seed and names the stages
/// whose outputs differ.
pub fn nondeterministic_stages(seed: u64) -> Vec<&'static str> {
    use unblur::data::{split_unpaired, synthetic_pairs, PatchSampler};
    use unblur::diffusion::generate_prior;
    use unblur::eval::eval_pairs;
    use unblur::train::{prepare_data, InferenceModel, Models, TrainState};

    let cfg = tiny_config();
    let mut bad = Vec::new();
    let mut check = |name: &'static str, same: bool| {
        if !same {
            bad.push(name);
        }
    };
    let spec = cfg.data.blur_spec();
    let pairs = || synthetic_pairs(6, 24, &spec, seed).unwrap();
    let (p1, p2) = (pairs(), pairs());
    check(
        "synthesis",
        p1.iter().zip(&p2).all(|(a, b)| a.sharp.pixels == b.sharp.pixels && a.blurry.pixels == b.blurry.pixels),
    );
    let split = || split_unpaired(&p1, (0.6, 0.4), seed).unwrap().descriptor();
    check("split", split() == split());
    let (train_split, holdout) = prepare_data(&cfg, seed).unwrap();
    let sampler = PatchSampler::new(&train_split, 16, 2, true, seed).unwrap();
    check("sampling", sampler.batch(3).unwrap() == sampler.batch(3).unwrap());
    let digests = || {
        let m = Models::new(&cfg, seed).unwrap();
        m.stores.values().map(|s| s.digest().unwrap()).collect::<Vec<_>>()
    };
    check("initialization", digests() == digests());
    let train = || {
        let mut st = TrainState::stage1(&cfg, seed).unwrap();
        st.run(&train_split, 3, None).unwrap();
        let ck = st.checkpoint().unwrap();
        let mut st2 = TrainState::stage2_from(&ck, &cfg, seed).unwrap();
        st2.run(&train_split, 3, None).unwrap();
        let logs: Vec<String> = st.log.iter().chain(&st2.log).map(|l| l.csv_row()).collect();
        (logs, st2.checkpoint().unwrap().to_bytes().unwrap())
    };
    let (t1, t2) = (train(), train());
    check("training", t1 == t2);
    let ck = unblur::checkpoint::Checkpoint::from_bytes(&t1.1).unwrap();
    let model = InferenceModel::from_checkpoint(&ck).unwrap();
    let c = Tensor::ones((1, 4, 4, 4), DType::F32, &Device::Cpu).unwrap();
    let prior = || flat(&generate_prior(&c, &model.schedule, &model.denoiser, seed).unwrap());
    check("prior generation", prior() == prior());
    let report = || {
        let mut r = eval_pairs(&holdout, &model, seed).unwrap();
        r.wall_clock_s = 0.0;
        r
    };
    check("evaluation", report() == report());
    bad
}

/// Blurry and sharp subset sizes of a 0.6:0.4 split of 2103 single-pair scenes.
pub fn split_counts_2103(seed: u64) -> (usize, usize, bool) {
    use unblur::data::{split_unpaired, Domain, ImageSample, ScenePair};
    let sample = |i: usize, domain| ImageSample {
        pixels: FeatureMap::filled(1, 1, 3, 0.5),
        scene_id: format!("scene{i:04}"),
        domain,
    };
    let pairs: Vec<ScenePair> = (0..2103)
        .map(|i| ScenePair {
            sharp: sample(i, Domain::Sharp),
            blurry: sample(i, Domain::Blurry),
        })
        .collect();
    let d = split_unpaired(&pairs, (0.6, 0.4), seed).unwrap().descriptor();
    let disjoint = d.blurry_scenes.iter().all(|s| d.sharp_scenes.binary_search(s).is_err());
    (d.blurry_count, d.sharp_count, disjoint)
}

/// Call counts of every network around one full-bundle restoration:
/// `(tpe, reblur, deblur, denoiser)` deltas.
pub fn inference_call_deltas(models: &unblur::train::Models, b: &Tensor) -> [usize; 4] {
    let counts = |m: &unblur::train::Models| {
        [m.tpe.calls().count(), m.reblur.calls().count(), m.deblur.calls().count(), m.denoiser.calls().count()]
    };
    let before = counts(models);
    models.restore(b, 0).unwrap();
    let after = counts(models);
    [0, 1, 2, 3].map(|i| after[i] - before[i])
}
