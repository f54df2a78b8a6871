use std::path::Path;
use std::process::Command;

use dualgate::checkpoint::Checkpoint;
use dualgate::config::RunConfig;
use dualgate::env::{EnvConfig, Environment, GateAction};
use dualgate::trainer::{calibrate, evaluate, evaluate_checkpoint, moving_average, rollout, train};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config(out: &Path, episodes: usize, per_batch: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.output_dir = out.to_path_buf();
    cfg.master_seed = 5;
    cfg.eval_episodes = 0;
    cfg.checkpoint_every = 1;
    cfg.ppo.total_episodes = episodes;
    cfg.ppo.episodes_per_batch = per_batch;
    cfg.ppo.hidden_sizes = vec![16];
    cfg
}

#[test]
fn four_episodes_in_batches_of_two() {
    let dir = tempfile::tempdir().unwrap();
    let summary = train(&small_config(dir.path(), 4, 2)).unwrap();
    assert_eq!(summary.batches, 2);
    assert_eq!(summary.scores.len(), 4);
    let log = std::fs::read_to_string(dir.path().join("training_log.csv")).unwrap();
    let rows: Vec<&str> = log.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    for (i, row) in rows.iter().enumerate() {
        assert!(row.starts_with(&format!("{},", i + 1)));
    }
    // Loss columns are filled on the last row of each batch only.
    assert!(rows[0].ends_with(",,,,,"));
    assert!(!rows[1].ends_with(",,,,,"));
    assert!(dir.path().join("checkpoints/ckpt_1.bin").exists());
    assert!(dir.path().join("checkpoints/ckpt_2.bin").exists());
    assert_eq!(Checkpoint::load(&summary.final_checkpoint).unwrap().policy.step, 2 * 4);
}

#[test]
fn training_is_reproducible_and_worker_independent() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    train(&small_config(a.path(), 6, 3)).unwrap();
    train(&small_config(b.path(), 6, 3)).unwrap();
    let mut threaded = small_config(c.path(), 6, 3);
    threaded.workers = 2;
    train(&threaded).unwrap();
    let log = |d: &Path| std::fs::read(d.join("training_log.csv")).unwrap();
    assert_eq!(log(a.path()), log(b.path()));
    assert_eq!(log(a.path()), log(c.path()));
    let ck = |d: &Path| Checkpoint::load(&d.join("checkpoints/ckpt_2.bin")).unwrap();
    let (ca, cc) = (ck(a.path()), ck(c.path()));
    assert_eq!((ca.policy, ca.value), (cc.policy, cc.value));
}

#[test]
fn checkpoint_round_trip_preserves_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let summary = train(&small_config(dir.path(), 4, 4)).unwrap();
    let loaded = Checkpoint::load(&summary.final_checkpoint).unwrap();
    assert_eq!(loaded.policy, summary.agent.policy);
    assert_eq!(loaded.value, summary.agent.value);
    let env = loaded.config.env();
    let direct = evaluate(&summary.agent.policy, &env, 3, 17).unwrap();
    let via_file = evaluate_checkpoint(&loaded, 3, 17).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&direct.scores), bits(&via_file.scores));
    assert_eq!(direct.mean.to_bits(), via_file.mean.to_bits());
    assert!(evaluate(&loaded.policy, &env, 0, 1).unwrap_err().is_usage());
}

#[test]
fn rollout_frames_match_episode_length() {
    let dir = tempfile::tempdir().unwrap();
    let summary = train(&small_config(dir.path(), 2, 2)).unwrap();
    let env = EnvConfig::default();
    let out = dir.path().join("r");
    let plain = rollout(&summary.agent.policy, &env, 3, &out, false).unwrap();
    assert_eq!(plain.frames, 0);
    let ppm = |d: &Path| {
        std::fs::read_dir(d)
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "ppm"))
            .count()
    };
    assert_eq!(ppm(&plain.dir), 0);
    let trace = std::fs::read_to_string(plain.dir.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), plain.steps + 1);

    let rendered = rollout(&summary.agent.policy, &env, 3, &out, true).unwrap();
    assert_eq!(rendered.steps, plain.steps);
    assert_eq!(rendered.frames, rendered.steps);
    assert_eq!(ppm(&rendered.dir), rendered.steps);
}

#[test]
fn calibration_uses_ceiling_lengths() {
    let cal = calibrate(&EnvConfig::default(), 5, 3, 70.0).unwrap();
    assert_eq!(cal.substeps.len(), 5);
    let (s, median) = cal.candidates[cal.chosen - 1];
    assert_eq!(s, cal.chosen);
    assert_eq!(median, cal.median_length);

    // Replaying one field at the chosen setting gives ceil(n / S) steps.
    let mut cfg = EnvConfig::default();
    cfg.solver.substeps_per_action = cal.chosen;
    let mut env = Environment::new(cfg).unwrap();
    env.reset(dualgate::seeding::derive(3, dualgate::seeding::STREAM_CALIBRATE, 0)).unwrap();
    let mut steps = 0;
    while !env.step(GateAction::Both).unwrap().done {
        steps += 1;
    }
    assert_eq!(steps + 1, cal.substeps[0].div_ceil(cal.chosen));
}

#[test]
fn random_policy_episodes_respect_the_contract() {
    let mut env = Environment::new(EnvConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for seed in 0..20 {
        let mut prev = env.reset(seed).unwrap();
        let mut total = 0.0;
        let mut raw = 0.0;
        loop {
            let out = env.step(GateAction::from_index(rng.random_range(0..3)).unwrap()).unwrap();
            for (a, b) in prev.bits.iter().zip(&out.observation.bits) {
                assert!(b >= a, "sensor switched off");
            }
            prev = out.observation;
            total += out.reward;
            raw += out.info.raw_reward;
            if out.done {
                let score = out.info.score.unwrap();
                assert!((0.0..=1.0).contains(&score));
                assert!((total - score).abs() < 1e-12);
                assert!(!out.info.truncated);
                break;
            }
        }
        assert!(raw <= 7.0);
    }
}

#[test]
fn cli_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_dualgate");
    let dir = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| Command::new(bin).args(args).output().unwrap().status.code();
    assert_eq!(code(&["frobnicate"]), Some(1));
    assert_eq!(code(&["train", "--config", "/nonexistent.toml"]), Some(1));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[ppo]\nunknown_key = 1\n").unwrap();
    assert_eq!(code(&["train", "--config", bad.to_str().unwrap()]), Some(1));
    let garbage = dir.path().join("garbage.bin");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    assert_eq!(code(&["eval", "--checkpoint", garbage.to_str().unwrap(), "--episodes", "1", "--seed", "0"]), Some(2));

    let cfg = dir.path().join("ok.toml");
    let out = dir.path().join("run");
    std::fs::write(
        &cfg,
        "eval_episodes = 0\n[ppo]\ntotal_episodes = 2\nepisodes_per_batch = 2\nhidden_sizes = [8]\n",
    )
    .unwrap();
    assert_eq!(code(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]), Some(0));
    let ck = out.join("checkpoints/ckpt_1.bin");
    let ck = ck.to_str().unwrap();
    assert_eq!(code(&["eval", "--checkpoint", ck, "--episodes", "0", "--seed", "0"]), Some(1));
    assert_eq!(code(&["eval", "--checkpoint", ck, "--episodes", "1", "--seed", "0"]), Some(0));
    let rollout_out = dir.path().join("frames");
    assert_eq!(
        code(&["rollout", "--checkpoint", ck, "--seed", "4", "--render", "--out", rollout_out.to_str().unwrap()]),
        Some(0)
    );
    assert!(rollout_out.join("rollout_4/trace.csv").exists());
    assert!(rollout_out.join("rollout_4/frame_0001.ppm").exists());
}

proptest! {
    #[test]
    fn moving_average_matches_brute_force(scores in proptest::collection::vec(0.0f64..1.0, 1..500)) {
        let ma = moving_average(&scores, 100).unwrap();
        for (i, m) in ma.iter().enumerate() {
            let lo = i.saturating_sub(99);
            let brute = scores[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64;
            prop_assert!((m - brute).abs() < 1e-12);
        }
    }
}
