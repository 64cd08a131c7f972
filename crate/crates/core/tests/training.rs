//! End-to-end behaviour of the two training stages, inference and
//! evaluation on a tiny configuration.

mod common;

use candle_core::{DType, Device, Tensor};

use common::suites::{inference_call_deltas, split_counts_2103, tiny_config};
use unblur::checkpoint::Checkpoint;
use unblur::config::Ablation;
use unblur::data::io::write_manifest;
use unblur::eval::{eval_dataset, eval_pairs, psnr, EvalReport};
use unblur::train::{prepare_data, InferenceModel, TrainState, GROUPS};
use unblur::{Config, Error};

fn stage1(cfg: &Config, steps: usize) -> TrainState {
    let (split, _) = prepare_data(cfg, 0).unwrap();
    let mut st = TrainState::stage1(cfg, 0).unwrap();
    st.run(&split, steps, None).unwrap();
    st
}

fn digest(st: &TrainState, group: &str) -> String {
    st.models.store(group).digest().unwrap()
}

#[test]
fn stage_two_starts_from_stage_one_and_keeps_the_encoder_frozen() {
    let cfg = tiny_config();
    let (split, _) = prepare_data(&cfg, 0).unwrap();
    let s1 = stage1(&cfg, 4);
    let ck = s1.checkpoint().unwrap();
    let mut s2 = TrainState::stage2_from(&ck, &cfg, 0).unwrap();
    for g in ["tpe", "deblur", "reblur", "disc"] {
        assert_eq!(digest(&s2, g), ck.meta.digests[g], "{g} not handed over");
    }
    assert_eq!(s2.disc_opt.steps_taken(), s1.disc_opt.steps_taken());
    assert_eq!(s2.gen_opt.steps_taken(), 0);
    let (tpe0, dif0, deb0) = (digest(&s2, "tpe"), digest(&s2, "diffusion"), digest(&s2, "deblur"));
    s2.run(&split, 100, None).unwrap();
    assert_eq!(digest(&s2, "tpe"), tpe0);
    assert_ne!(digest(&s2, "diffusion"), dif0);
    assert_ne!(digest(&s2, "deblur"), deb0, "joint training should update the deblurrer");
    assert!(s2.log.iter().all(|l| l.diff.is_finite() && l.diff > 0.0));
    let out = s2.checkpoint().unwrap();
    assert_eq!(out.meta.stage, 2);
    assert_eq!(out.meta.frozen, vec!["tpe".to_string()]);
}

#[test]
fn tampering_with_the_frozen_encoder_is_detected() {
    let cfg = tiny_config();
    let ck = stage1(&cfg, 1).checkpoint().unwrap();
    let s2 = TrainState::stage2_from(&ck, &cfg, 0).unwrap();
    let store = s2.models.store("tpe");
    let (name, var) = store.vars().iter().next().unwrap();
    store.assign(name, &(var.as_tensor() + 1.0).unwrap()).unwrap();
    assert!(matches!(s2.check_frozen(), Err(Error::FrozenChanged(g)) if g == "tpe"));
}

#[test]
fn stage_two_requires_the_diffusion_model() {
    let mut cfg = tiny_config();
    let ck = stage1(&cfg, 1).checkpoint().unwrap();
    cfg.ablation = Ablation::without("diffusion").unwrap();
    assert!(matches!(TrainState::stage2_from(&ck, &cfg, 0), Err(Error::Config(_))));
}

#[test]
fn every_ablation_trains() {
    let base = tiny_config();
    let (split, holdout) = prepare_data(&base, 0).unwrap();
    for name in Ablation::NAMES {
        let mut cfg = base.clone();
        cfg.ablation = Ablation::without(name).unwrap();
        let mut st = TrainState::stage1(&cfg, 0).unwrap();
        st.run(&split, 10, None).unwrap();
        let mut ck = st.checkpoint().unwrap();
        if cfg.ablation.diffusion {
            let mut s2 = TrainState::stage2_from(&ck, &cfg, 0).unwrap();
            let deblur_before = digest(&s2, "deblur");
            s2.run(&split, 10, None).unwrap();
            assert_eq!(
                digest(&s2, "deblur") == deblur_before,
                !cfg.ablation.joint_train,
                "{name}: deblur update does not follow the joint-training switch"
            );
            ck = s2.checkpoint().unwrap();
            st = s2;
        }
        for l in &st.log {
            assert!(l.total.is_finite(), "{name}: non-finite loss at step {}", l.step);
            if !cfg.ablation.wave_loss {
                assert_eq!(l.wave, 0.0, "{name}: wave loss still active");
            }
        }
        let report = eval_pairs(&holdout, &InferenceModel::from_checkpoint(&ck).unwrap(), 0).unwrap();
        assert!(report.mean_psnr.is_finite(), "{name}");
    }
}

#[test]
fn inference_touches_only_the_deblurring_and_diffusion_networks() {
    let cfg = tiny_config();
    let st = stage1(&cfg, 1);
    let b = Tensor::full(0.5f32, (1, 3, 16, 16), &Device::Cpu).unwrap();
    let [tpe, reblur, deblur, denoiser] = inference_call_deltas(&st.models, &b);
    assert_eq!((tpe, reblur, deblur, denoiser), (0, 0, 1, cfg.diffusion.steps));
    // the standalone model loads without the encoder and reblurring groups
    let mut ck = st.checkpoint().unwrap();
    ck.tensors.retain(|k, _| !k.starts_with("tpe/") && !k.starts_with("reblur/"));
    let model = InferenceModel::from_checkpoint(&ck).unwrap();
    model.restore(&b, 0).unwrap();
    assert_eq!(model.denoiser.calls().count(), cfg.diffusion.steps);
}

#[test]
fn identity_restoration_scores_like_the_blurry_input() {
    let cfg = tiny_config();
    let (_, holdout) = prepare_data(&cfg, 0).unwrap();
    let st = TrainState::stage1(&cfg, 0).unwrap();
    let store = st.models.store("deblur");
    for name in ["head.weight", "head.bias"] {
        let v = store.get(name).unwrap();
        store.assign(name, &Tensor::zeros(v.dims(), DType::F32, &Device::Cpu).unwrap()).unwrap();
    }
    let model = InferenceModel::from_checkpoint(&st.checkpoint().unwrap()).unwrap();
    let report = eval_pairs(&holdout, &model, 0).unwrap();
    for (img, pair) in report.images.iter().zip(&holdout) {
        let want = psnr(&pair.blurry.pixels, &pair.sharp.pixels, 1.0).unwrap();
        assert!((img.psnr - want).abs() < 1e-9, "{}: {} vs {want}", img.id, img.psnr);
        assert!((img.psnr - img.input_psnr).abs() < 1e-9);
    }
    assert!(report.median_psnr_gain().abs() < 1e-9);
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let cfg = tiny_config();
    let (split, _) = prepare_data(&cfg, 0).unwrap();
    let mut straight = TrainState::stage1(&cfg, 0).unwrap();
    straight.run(&split, 6, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = TrainState::stage1(&cfg, 0).unwrap();
    first.run(&split, 3, None).unwrap();
    let path = first.save(dir.path(), None).unwrap();
    let mut resumed = TrainState::resume(&Checkpoint::load(&path).unwrap()).unwrap();
    resumed.run(&split, 3, None).unwrap();
    for g in GROUPS {
        assert_eq!(digest(&resumed, g), digest(&straight, g), "{g}");
    }
    assert!(dir.path().join("stage1_losses.csv").exists());
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let path = stage1(&cfg, 1).save(dir.path(), None).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let at = bytes.len() - 100;
    bytes[at] ^= 0x40;
    std::fs::write(&path, &bytes).unwrap();
    let err = Checkpoint::load(&path).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)));
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn empty_manifest_is_a_data_error() {
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("manifest.jsonl");
    write_manifest(&manifest, &[]).unwrap();
    let model = InferenceModel::from_checkpoint(&stage1(&cfg, 1).checkpoint().unwrap()).unwrap();
    assert!(matches!(eval_dataset(&manifest, &model, 0), Err(Error::Data(_))));
}

#[test]
fn reports_are_reproducible_and_round_trip() {
    let cfg = tiny_config();
    let (_, holdout) = prepare_data(&cfg, 0).unwrap();
    let model = InferenceModel::from_checkpoint(&stage1(&cfg, 2).checkpoint().unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = eval_pairs(&holdout, &model, 5).unwrap();
    let b = eval_pairs(&holdout, &model, 5).unwrap();
    assert_eq!(a.images, b.images);
    a.write(dir.path()).unwrap();
    let back = EvalReport::from_json(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(back.images, a.images);
    assert_eq!(back.config_digest, cfg.digest());
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), holdout.len() + 1);
}

#[test]
fn split_of_2103_pairs_matches_the_benchmark_sizes() {
    assert_eq!(split_counts_2103(0), (1262, 841, true));
}
