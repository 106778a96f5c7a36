use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crowdcast_core::baseline::constant_velocity;
use crowdcast_core::checkpoint::{Archive, ArchiveError};
use crowdcast_core::config::{ConfigError, TrainConfig};
use crowdcast_core::data::{
    load_scene_dir, normalize_window, synth_generate, synth_generate_with, window_scene, write_scene, Horizon,
    SynthConfig, SynthMix, TrajectoryWindow,
};
use crowdcast_core::eval::{evaluate, summarize, ConstantVelocity, EvalOptions, GroundTruthEcho, Predictor};
use crowdcast_core::exec::Execution;
use crowdcast_core::metrics::{ade_fde, MinSelection};
use crowdcast_core::model::HyperSttn;
use crowdcast_core::rng::stream;
use crowdcast_core::train::train;

const SMALL: &str = "epochs=2\nseed=4\nd_model=16\nd_emb=16\nheads=4\nffn_hidden=32\nlayers=1\nd_z=8\ncvae_hidden=32\n";

fn windows(seed: u64) -> Vec<TrajectoryWindow> {
    let scenes = synth_generate(seed, 2, (3, 5)).unwrap();
    scenes.iter().flat_map(|s| window_scene(s, Horizon::default(), 6)).collect()
}

fn opts(k: usize, seed: u64) -> EvalOptions {
    EvalOptions { k, seed, selection: MinSelection::Independent, exec: Execution::Parallel }
}

#[test]
fn scene_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = synth_generate(1, 3, (2, 4)).unwrap();
    for (i, s) in scenes.iter().enumerate().rev() {
        write_scene(s, &dir.path().join(format!("s{i}.txt"))).unwrap();
    }
    std::fs::write(dir.path().join("notes.md"), "ignored").unwrap();
    let loaded = load_scene_dir(dir.path()).unwrap();
    assert_eq!(loaded.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>(), ["s0", "s1", "s2"]);
    for ((_, got), want) in loaded.iter().zip(&scenes) {
        assert_eq!(got, want);
    }
    assert!(load_scene_dir(tempfile::tempdir().unwrap().path()).is_err());
}

#[test]
fn checkpoint_file_round_trip_reproduces_metrics() {
    let cfg = TrainConfig::parse_str(SMALL).unwrap();
    let data = windows(2);
    let out = train(&cfg, &data[..6], Execution::Parallel, &mut |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    Archive::from_params(&out.model.params).save(&path).unwrap();

    let load = || {
        let mut m = HyperSttn::new(&cfg.model, 99).unwrap();
        Archive::load(&path).unwrap().load_into(&mut m.params).unwrap();
        m
    };
    let (a, b) = (load(), load());
    let ma = evaluate(&a, &data, "f", opts(5, 3)).unwrap();
    let mb = evaluate(&b, &data, "f", opts(5, 3)).unwrap();
    assert_eq!(ma, mb);
    assert!(!ma.is_empty());
}

#[test]
fn checkpoint_for_another_config_is_rejected() {
    let small = TrainConfig::parse_str(SMALL).unwrap();
    let wide = TrainConfig::parse_str(&SMALL.replace("d_z=8", "d_z=4")).unwrap();
    let archive = Archive::from_params(&HyperSttn::new(&small.model, 0).unwrap().params);
    let mut other = HyperSttn::new(&wide.model, 0).unwrap();
    assert!(matches!(archive.load_into(&mut other.params), Err(ArchiveError::Mismatch(_))));
}

#[test]
fn oracle_predictors() {
    let data = windows(3);
    let echo = summarize("f", &evaluate(&GroundTruthEcho, &data, "f", opts(20, 0)).unwrap());
    assert_eq!((echo.min_ade, echo.min_fde), (0.0, 0.0));

    let cfg = SynthConfig { seed: 5, n_scenes: 2, mix: SynthMix::ConstantVelocity, ..SynthConfig::default() };
    let cv_windows: Vec<_> = synth_generate_with(&cfg)
        .unwrap()
        .iter()
        .flat_map(|s| window_scene(&s.scene, Horizon::default(), 4))
        .collect();
    let cv = summarize("f", &evaluate(&ConstantVelocity, &cv_windows, "f", opts(1, 0)).unwrap());
    assert!(cv.min_ade < 1e-6 && cv.windows > 0, "{cv:?}");
}

#[test]
fn single_sample_metric_matches_direct_prediction() {
    let cfg = TrainConfig::parse_str(SMALL).unwrap();
    let model = HyperSttn::new(&cfg.model, 1).unwrap();
    let data = windows(4);
    let metrics = evaluate(&model, &data, "f", opts(1, 8)).unwrap();
    for m in &metrics {
        let (w, _) = normalize_window(&data[m.window]);
        let mut rng = stream(8, &[m.window as u64]);
        let pred = model.predict(&w, 1, &mut rng).unwrap().remove(0);
        let (obs, steps) = (w.horizon.obs, w.horizon.pred);
        let presence: Vec<bool> = (0..w.n_agents())
            .flat_map(|a| (obs..obs + steps).map(move |t| (a, t)))
            .map(|(a, t)| w.present(a, t))
            .collect();
        let gt: Vec<[f64; 2]> = (0..w.n_agents())
            .flat_map(|a| (obs..obs + steps).map(move |t| (a, t)))
            .map(|(a, t)| w.pos(a, t))
            .collect();
        assert_eq!(ade_fde(&pred, &gt, &presence, steps).unwrap(), (m.min_ade, m.min_fde));
    }
}

#[test]
fn constant_velocity_is_translation_invariant() {
    let w = &windows(6)[0];
    let shifted = w.map_present(|_, _, p| [p[0] + 3.5, p[1] - 1.25]);
    let a = constant_velocity(w);
    let b = constant_velocity(&shifted);
    for (p, q) in a.iter().zip(&b) {
        assert!((q[0] - p[0] - 3.5).abs() < 1e-12 && (q[1] - p[1] + 1.25).abs() < 1e-12);
    }
}

#[test]
fn training_outcome_is_independent_of_execution_mode() {
    let cfg = TrainConfig::parse_str(SMALL).unwrap();
    let data = windows(7);
    let a = train(&cfg, &data[..5], Execution::Parallel, &mut |_| {}).unwrap();
    let b = train(&cfg, &data[..5], Execution::Sequential, &mut |_| {}).unwrap();
    assert_eq!(Archive::from_params(&a.model.params).to_bytes(), Archive::from_params(&b.model.params).to_bytes());
    assert_eq!(a.epochs, b.epochs);
}

#[test]
fn config_file_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    std::fs::write(&path, "epochs = 3\n# comment\nlearning_rate=0.001\n").unwrap();
    let cfg = TrainConfig::load(&path).unwrap();
    assert_eq!((cfg.epochs, cfg.learning_rate), (3, 0.001));
    std::fs::write(&path, "epochs=3\nepocs=4\n").unwrap();
    assert!(matches!(TrainConfig::load(&path), Err(ConfigError::UnknownKey { .. })));
    assert!(TrainConfig::load(&dir.path().join("missing.cfg")).is_err());
}

#[test]
fn sampling_is_seed_deterministic() {
    let cfg = TrainConfig::parse_str(SMALL).unwrap();
    let model = HyperSttn::new(&cfg.model, 2).unwrap();
    let (w, _) = normalize_window(&windows(8)[0]);
    let draw = |seed| model.predict(&w, 3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    assert_eq!(draw(1), draw(1));
    assert_ne!(draw(1), draw(2));
}
