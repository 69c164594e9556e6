//! Library-level pipeline: base training, dataset, consistency training,
//! persistence and switched inference on a small model.

use pcm_core::denoiser::{
    ddpm_train, load_checkpoint, save_checkpoint, toy_dataset, DdpmConfig, DenoiserParams,
    NoiseSchedule, ToyKind,
};
use pcm_core::pct::{
    generate_dataset, load_adapters, save_adapters, train_pcm, AlphaMode, PcmModel, PctConfig,
    TrajectoryDataset,
};
use pcm_core::picard::{prefix_exactness, run_picard, PicardConfig};
use pcm_core::solver::{sequential_sample, StepFn, StepKind};
use pcm_core::switching::{run_pcm_inference, SwitchConfig, SwitchMode};
use pcm_core::tensor::{gaussian, SeededRng};

fn small_base() -> DenoiserParams {
    let data = toy_dataset(ToyKind::TwoMoons, 512, &mut SeededRng::new(1));
    let init = DenoiserParams::init(
        2,
        &[24, 24],
        2,
        NoiseSchedule::cosine(16).unwrap(),
        &mut SeededRng::new(2),
    )
    .unwrap();
    let cfg = DdpmConfig {
        epochs: 8,
        batch_size: 64,
        seed: 3,
        ..DdpmConfig::default()
    };
    ddpm_train(init, &data, &cfg).unwrap().0
}

fn exact(max_iters: usize) -> PicardConfig {
    PicardConfig {
        max_iters,
        tol: 1e-300,
        ..PicardConfig::default()
    }
}

#[test]
fn train_persist_and_sample() {
    let dir = tempfile::tempdir().unwrap();
    let base = small_base();
    let ckpt = dir.path().join("base.ckpt");
    save_checkpoint(&base, &ckpt).unwrap();
    let base = load_checkpoint(&ckpt).unwrap();

    let step = StepFn::new(StepKind::Ddim, base.schedule());
    let (ds, _) = generate_dataset(&base, &step, 12, 6, 4).unwrap();
    let ds_path = dir.path().join("traj.pctd");
    ds.save(&ds_path).unwrap();
    let ds = TrajectoryDataset::load(&ds_path).unwrap();
    assert_eq!(std::fs::read(&ds_path).unwrap(), ds.to_bytes());

    for lora_rank in [None, Some(2)] {
        let cfg = PctConfig {
            iterations: 40,
            batch_size: 4,
            lr: 1e-3,
            alpha_mode: AlphaMode::Empirical,
            lora_rank,
            select_every: 10,
            holdout_seeds: 3,
            ..PctConfig::default()
        };
        let out = train_pcm(&base, &step, &ds, &cfg).unwrap();
        assert_eq!(out.log.losses.len(), 40);
        assert_eq!(out.log.selection.len(), 4);
        if let PcmModel::Lora(set) = &out.selected {
            let path = dir.path().join("pcm.lora");
            save_adapters(set, base.checksum(), &path).unwrap();
            let (back, sum) = load_adapters(&path).unwrap();
            assert_eq!(&back, set);
            assert_eq!(sum, base.checksum());
        }
        let mode = if lora_rank.is_some() {
            SwitchMode::Lora
        } else {
            SwitchMode::Feature
        };
        for seed in 0..3u64 {
            let x0 = gaussian(&mut SeededRng::new(100 + seed), 2);
            let truth = sequential_sample(&step, &base, &x0).unwrap();
            // Full switching hands over to the base model, whose fixed point is the
            // sequential trajectory.
            let switch = SwitchConfig {
                stiffness: 2.0,
                iters: 6,
                mode,
            };
            let rep = run_pcm_inference(
                &out.selected,
                &base,
                &step,
                &x0,
                &switch,
                &exact(40),
                Some(&truth),
            )
            .unwrap();
            assert!(rep.final_trajectory.max_abs_diff(&truth) <= 1e-10);
        }
    }
}

#[test]
fn trained_model_prefix_and_exact_convergence() {
    let base = small_base();
    let step = StepFn::new(StepKind::Ddim, base.schedule());
    for seed in 0..4u64 {
        let x0 = gaussian(&mut SeededRng::new(seed), 2);
        for k in [1, 4, 8, 16] {
            assert!(prefix_exactness(&step, &base, &x0, k).unwrap());
        }
        let truth = sequential_sample(&step, &base, &x0).unwrap();
        let rep = run_picard(&step, &base, &x0, &exact(16), Some(&truth)).unwrap();
        assert!(rep.final_trajectory.max_abs_diff(&truth) <= 1e-10);
    }
}
