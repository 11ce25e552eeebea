//! Cross-embodiment policy versus per-embodiment specialists, plus the
//! zero-shot check on the shifted navigation dynamics.
//!
//! Everything is cached under `<root>/<config hash>-seed<data seed>/`, so an
//! interrupted run resumes at the first model without a `best.xckpt`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{evaluate_checkpoint, gen_data, load_shards, shard_path, PolicyReport, DESK_DATASETS};
use crate::config::{Config, SuiteEntry};
use crate::error::{Error, Result};
use crate::trainer::{train, TrainOptions};

/// Largest allowed |cross − specialist| success-rate gap.
pub const PARITY_GAP: f64 = 0.10;
/// Minimum quadruped normalized reward of the cross-embodiment policy.
pub const QUAD_REWARD_FLOOR: f64 = 0.8;
/// Shifted-dynamics success must reach this fraction of nominal success.
pub const ZERO_SHOT_RATIO: f64 = 0.5;

const EMBODIMENTS: [&str; 4] = ["arm1", "nav", "bimanual", "quad"];

#[derive(Clone, Debug)]
pub struct ParityOptions {
    pub trials: usize,
    pub data_seed: u64,
    pub workers: usize,
    pub verbose: bool,
}

impl Default for ParityOptions {
    fn default() -> Self {
        Self {
            trials: 100,
            data_seed: 0,
            workers: super::default_workers(),
            verbose: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParityRow {
    pub embodiment: String,
    pub cross: f64,
    pub specialist: f64,
    /// `cross - specialist`.
    pub gap: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cross_reward: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub specialist_reward: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShot {
    pub nav: f64,
    pub nav_shifted: f64,
    /// `nav_shifted / nav`, absent when `nav` is zero.
    pub ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParityReport {
    pub config_hash: String,
    pub data_seed: u64,
    pub trials: usize,
    pub rows: Vec<ParityRow>,
    pub zero_shot: ZeroShot,
    pub policies: Vec<PolicyReport>,
    /// Wall-clock seconds per trained model, measured when it was trained;
    /// `None` for a reused model without a timing record.
    pub train_seconds: BTreeMap<String, Option<f64>>,
    /// Wall-clock seconds of data generation plus evaluation.
    pub other_seconds: f64,
}

impl ParityReport {
    pub fn row(&self, embodiment: &str) -> Option<&ParityRow> {
        self.rows.iter().find(|r| r.embodiment == embodiment)
    }

    /// Every gap within [`PARITY_GAP`] and the quadruped reward floor met.
    pub fn parity_holds(&self) -> bool {
        let gaps = self.rows.iter().all(|r| r.gap.abs() <= PARITY_GAP);
        let quad = self
            .row("quad")
            .and_then(|r| r.cross_reward)
            .is_some_and(|r| r >= QUAD_REWARD_FLOOR);
        gaps && quad
    }

    pub fn zero_shot_holds(&self) -> bool {
        self.zero_shot.nav_shifted >= ZERO_SHOT_RATIO * self.zero_shot.nav
    }

    /// Total wall clock, unknown if any model's training time is.
    pub fn total_seconds(&self) -> Option<f64> {
        let train: Option<f64> = self.train_seconds.values().copied().sum();
        train.map(|t| t + self.other_seconds)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<10} {:>7} {:>11} {:>7} {:>8}\n",
            "embodiment", "cross", "specialist", "gap", "reward"
        );
        for r in &self.rows {
            let reward = r.cross_reward.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
            out += &format!(
                "{:<10} {:>7.2} {:>11.2} {:>+7.2} {:>8}\n",
                r.embodiment, r.cross, r.specialist, r.gap, reward
            );
        }
        out += &format!(
            "zero-shot nav {:.2} -> nav-shifted {:.2}\n",
            self.zero_shot.nav, self.zero_shot.nav_shifted
        );
        match self.total_seconds() {
            Some(s) => out += &format!("wall clock {:.0} min\n", s / 60.0),
            None => out += "wall clock unknown\n",
        }
        out
    }
}

/// Cache directory of a parity run.
pub fn parity_dir(config: &Config, root: &Path, data_seed: u64) -> PathBuf {
    root.join(format!("{}-seed{data_seed}", &config.hash()[..16]))
}

fn log(opts: &ParityOptions, msg: &str) {
    if opts.verbose {
        eprintln!("[parity] {msg}");
    }
}

fn train_cached(
    config: &Config,
    datasets: &[&str],
    data: &Path,
    out: &Path,
    opts: &ParityOptions,
) -> Result<(PathBuf, Option<f64>)> {
    let best = out.join("best.xckpt");
    let timing = out.join("train_seconds");
    if best.exists() {
        log(opts, &format!("reusing {}", best.display()));
        let secs = std::fs::read_to_string(&timing)
            .ok()
            .and_then(|s| s.trim().parse().ok());
        return Ok((best, secs));
    }
    log(opts, &format!("training {} on {datasets:?}", out.display()));
    let mut c = config.clone();
    c.mixture = config.mixture.restricted(datasets);
    let shards = load_shards(data)?;
    // a stale partial run would otherwise mix its checkpoints into ours
    if out.exists() {
        std::fs::remove_dir_all(out).map_err(|e| Error::file(out, e))?;
    }
    let start = Instant::now();
    let outcome = train(&c, shards, out, &TrainOptions { verbose: opts.verbose })?;
    let secs = start.elapsed().as_secs_f64();
    std::fs::write(&timing, format!("{secs:.1}\n")).map_err(|e| Error::file(&timing, e))?;
    Ok((outcome.best_path().to_path_buf(), Some(secs)))
}

fn success(report: &PolicyReport, embodiment: &str) -> Result<(f64, Option<f64>)> {
    report
        .results
        .iter()
        .find(|r| r.embodiment == embodiment)
        .map(|r| (r.success_rate, r.normalized_reward))
        .ok_or_else(|| Error::Execution(format!("no result for {embodiment}")))
}

/// Trains (or reuses) the cross-embodiment policy and one specialist per
/// embodiment, evaluates them on `opts.trials` seeds from the config's
/// `seed_base` and writes `parity_report.json`.
pub fn parity_run(config: &Config, root: &Path, opts: &ParityOptions) -> Result<ParityReport> {
    let dir = parity_dir(config, root, opts.data_seed);
    let report_path = dir.join("parity_report.json");
    if let Ok(text) = std::fs::read_to_string(&report_path) {
        if let Ok(r) = serde_json::from_str::<ParityReport>(&text) {
            if r.trials == opts.trials {
                log(opts, &format!("reusing {}", report_path.display()));
                return Ok(r);
            }
        }
    }

    let mut other = Instant::now();
    let data = dir.join("data");
    if !DESK_DATASETS.iter().all(|(n, _)| shard_path(&data, n).exists()) {
        log(opts, "generating datasets");
        let sets: Vec<(String, usize)> =
            DESK_DATASETS.iter().map(|(n, c)| (n.to_string(), *c)).collect();
        gen_data(&data, &sets, opts.data_seed)?;
    }

    let mut other_seconds = other.elapsed().as_secs_f64();

    let mut train_seconds = BTreeMap::new();
    let (cross, secs) = train_cached(config, &EMBODIMENTS, &data, &dir.join("cross"), opts)?;
    train_seconds.insert("cross".to_owned(), secs);
    let mut specialists = Vec::new();
    for e in EMBODIMENTS {
        let (path, secs) = train_cached(config, &[e], &data, &dir.join(e), opts)?;
        train_seconds.insert(format!("{e}-only"), secs);
        specialists.push(path);
    }
    other = Instant::now();

    let seed_base = config.eval.seed_base;
    let suite = |names: &[&str]| -> Vec<SuiteEntry> {
        names
            .iter()
            .map(|n| SuiteEntry {
                embodiment: n.to_string(),
                trials: opts.trials,
            })
            .collect()
    };
    log(opts, "evaluating cross-embodiment policy");
    let mut all = EMBODIMENTS.to_vec();
    all.push("nav-shifted");
    let cross_report = evaluate_checkpoint("cross", &cross, &suite(&all), seed_base, opts.workers)?;

    let mut rows = Vec::new();
    let mut policies = vec![cross_report.clone()];
    for (e, path) in EMBODIMENTS.iter().zip(&specialists) {
        log(opts, &format!("evaluating {e} specialist"));
        let rep = evaluate_checkpoint(&format!("{e}-only"), path, &suite(&[e]), seed_base, opts.workers)?;
        let (c, cr) = success(&cross_report, e)?;
        let (s, sr) = success(&rep, e)?;
        rows.push(ParityRow {
            embodiment: e.to_string(),
            cross: c,
            specialist: s,
            gap: c - s,
            cross_reward: cr,
            specialist_reward: sr,
        });
        policies.push(rep);
    }
    other_seconds += other.elapsed().as_secs_f64();
    let nav = success(&cross_report, "nav")?.0;
    let nav_shifted = success(&cross_report, "nav-shifted")?.0;
    let report = ParityReport {
        config_hash: config.hash(),
        data_seed: opts.data_seed,
        trials: opts.trials,
        rows,
        zero_shot: ZeroShot {
            nav,
            nav_shifted,
            ratio: (nav > 0.0).then(|| nav_shifted / nav),
        },
        policies,
        train_seconds,
        other_seconds,
    };
    std::fs::write(&report_path, report.to_json()).map_err(|e| Error::file(&report_path, e))?;
    Ok(report)
}
