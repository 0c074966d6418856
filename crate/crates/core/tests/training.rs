use std::time::{Duration, Instant};

use confclip::config::ConfigFile;
use confclip::error::Error;
use confclip::tasks::Regime;
use confclip::trainer::experiments::collapse_config;
use confclip::trainer::{checkpoint_text, evaluate, run_training, run_training_observed};

fn easy_binary(steps: usize) -> ConfigFile {
    let mut cfg = ConfigFile::default();
    cfg.task.regime = Regime::Easy;
    cfg.reward.variant = "Binary01".into();
    cfg.run.steps = steps;
    cfg
}

#[test]
fn reference_stays_frozen_and_rollouts_are_on_policy() {
    let cfg = easy_binary(30);
    let m = cfg.manifest().unwrap();
    let initial = cfg.policy_config().build_base(&m.suite).unwrap();
    let mut seen = 0;
    let out = run_training_observed(&m, initial.clone(), |step, groups| {
        for r in groups.iter().flat_map(|g| &g.rollouts) {
            if r.policy_version != step as u64 {
                return Err(Error::InvalidInput(format!("step {step} saw version {}", r.policy_version)));
            }
        }
        seen += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, 30);
    assert_eq!(out.reference, initial);
    assert_ne!(out.policy, initial);
    assert_eq!(out.policy.version(), 30);
}

#[test]
fn training_beats_the_untrained_policy() {
    let cfg = easy_binary(300);
    let m = cfg.manifest().unwrap();
    let before = evaluate(&cfg.policy_config().build_base(&m.suite).unwrap(), &m.eval_suite, m.config.max_len).unwrap();
    let out = run_training(&m).unwrap();
    assert!(
        out.final_eval.accuracy > before.accuracy + 0.25,
        "{} -> {}",
        before.accuracy,
        out.final_eval.accuracy
    );
    let plot: Vec<f64> = out.records.iter().map(|r| r.correctness_reward_plot).collect();
    let head = plot[..20].iter().sum::<f64>() / 20.0;
    let tail = plot[plot.len() - 20..].iter().sum::<f64>() / 20.0;
    assert!(tail > head, "rollout accuracy {head} -> {tail}");
}

#[test]
fn default_run_fits_the_time_budget() {
    // G=7, batch 16, max_len 6, 300 steps
    let cfg = ConfigFile::default();
    assert_eq!((cfg.optim.group_size, cfg.optim.batch_tasks, cfg.run.max_len, cfg.run.steps), (7, 16, 6, 300));
    let start = Instant::now();
    run_training(&cfg.manifest().unwrap()).unwrap();
    assert!(start.elapsed() < Duration::from_secs(60), "took {:?}", start.elapsed());
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let mut cfg = ConfigFile::default();
    cfg.run.steps = 25;
    cfg.run.seed = 5;
    let m = cfg.manifest().unwrap();
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run_training(&m).unwrap())
    };
    let (one, four) = (run(1), run(4));
    assert_eq!(one.records, four.records);
    assert_eq!(checkpoint_text(&one.policy), checkpoint_text(&four.policy));
}

#[test]
fn every_reward_variant_trains_without_error() {
    for variant in ["Binary01", "BinarySign", "ConfWeighted", "ConfSign", "ConfClip"] {
        let mut cfg = ConfigFile::default();
        cfg.reward.variant = variant.into();
        cfg.run.steps = 20;
        let out = run_training(&cfg.manifest().unwrap()).unwrap();
        assert_eq!(out.records.len(), 20);
        for r in &out.records {
            assert!(r.shaped_reward_mean.is_finite() && (0.0..=1.0).contains(&r.degenerate_fraction));
        }
    }
}

#[test]
fn shipped_configs_match_the_presets() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let load = |name: &str| ConfigFile::load(&dir.join(name), &[]).unwrap();
    assert_eq!(load("default.toml"), ConfigFile::default());
    assert_eq!(load("collapse.toml"), collapse_config(0, 500));
    load("easy-binary.toml").manifest().unwrap();
}
