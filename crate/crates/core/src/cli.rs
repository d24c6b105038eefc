//! Experiment campaigns behind the `hafl` binary: per-seed runs, CSV and
//! JSON emission, and multi-scheme comparisons.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{generate_synthetic, load_tsv, partition_iid};
use crate::error::{HaflError, Result};
use crate::federation::{run_experiment, FederationData, RoundReport, Scheme};
use crate::matrix::Matrix;
use crate::model::FrozenBase;
use crate::seed;

pub const CSV_HEADER: &str =
    "round,seed,scheme,global_acc,global_loss,mean_client_acc,uploaded_params,uploaded_bytes";

/// Builds base model, client shards and test set for one seed.
///
/// Synthetic data is drawn from `seed`; file-backed data uses a zero base.
pub fn build_data(cfg: &ExperimentConfig, seed: u64) -> Result<FederationData> {
    let (base, train, test) = match (&cfg.train_file, &cfg.test_file) {
        (Some(train), Some(test)) => {
            let (l, d) = (cfg.feature_dim, cfg.class_count);
            let base = FrozenBase::new(Matrix::zeros(d, l))?;
            (base, load_tsv(train, l, d)?, load_tsv(test, l, d)?)
        }
        _ => {
            let task = generate_synthetic(&cfg.synthetic(seed))?;
            (task.base, task.train, task.test)
        }
    };
    if test.is_empty() {
        return Err(HaflError::Empty("test set"));
    }
    let shards = partition_iid(
        &train,
        cfg.n_clients,
        seed::derive_seed(seed, &[seed::TAG_PARTITION]),
    )?;
    Ok(FederationData { base, shards, test })
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub reports: Vec<RoundReport>,
}

pub fn run_seed(cfg: &ExperimentConfig, seed: u64, threads: usize) -> Result<SeedRun> {
    let data = build_data(cfg, seed)?;
    let reports = run_experiment(cfg.federation(seed), cfg.training, data, threads)?;
    Ok(SeedRun { seed, reports })
}

pub fn run_all_seeds(cfg: &ExperimentConfig, threads: usize) -> Result<Vec<SeedRun>> {
    cfg.seeds
        .iter()
        .map(|&s| run_seed(cfg, s, threads))
        .collect()
}

/// CSV body rows (no header) for one scheme.
pub fn csv_rows(scheme: Scheme, runs: &[SeedRun]) -> String {
    let mut out = String::new();
    for run in runs {
        for r in &run.reports {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.round,
                run.seed,
                scheme,
                r.global_accuracy,
                r.global_loss,
                r.mean_client_accuracy,
                r.uploaded_params,
                r.uploaded_bytes
            );
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Population standard deviation over seeds.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Stat {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointStats {
    pub round: usize,
    pub global_acc: Stat,
    pub global_loss: Stat,
    pub mean_client_acc: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub scheme: Scheme,
    pub seeds: Vec<u64>,
    pub rounds: usize,
    pub checkpoints: Vec<CheckpointStats>,
    pub mean_uploaded_params_per_round: f64,
    pub mean_uploaded_bytes_per_round: f64,
}

/// Mean ± std over seeds at each checkpoint round that was reached.
pub fn summarize(scheme: Scheme, runs: &[SeedRun], checkpoints: &[usize]) -> Summary {
    let rounds = runs.first().map_or(0, |r| r.reports.len());
    let mut stats = Vec::new();
    for &cp in checkpoints {
        if cp == 0 || cp > rounds {
            continue;
        }
        let at: Vec<&RoundReport> = runs.iter().map(|r| &r.reports[cp - 1]).collect();
        let pick =
            |f: fn(&RoundReport) -> f64| Stat::of(&at.iter().map(|r| f(r)).collect::<Vec<_>>());
        stats.push(CheckpointStats {
            round: cp,
            global_acc: pick(|r| r.global_accuracy),
            global_loss: pick(|r| r.global_loss),
            mean_client_acc: pick(|r| r.mean_client_accuracy),
        });
    }
    let all: Vec<&RoundReport> = runs.iter().flat_map(|r| &r.reports).collect();
    let n = all.len().max(1) as f64;
    Summary {
        scheme,
        seeds: runs.iter().map(|r| r.seed).collect(),
        rounds,
        checkpoints: stats,
        mean_uploaded_params_per_round: all.iter().map(|r| r.uploaded_params as f64).sum::<f64>()
            / n,
        mean_uploaded_bytes_per_round: all.iter().map(|r| r.uploaded_bytes as f64).sum::<f64>() / n,
    }
}

/// Writes through a sibling temp file and renames it into place.
fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| HaflError::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(|e| HaflError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| HaflError::io(path, e))
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub csv: PathBuf,
    pub summary_path: PathBuf,
    pub rounds_log: PathBuf,
    pub summary: Summary,
    pub csv_body: String,
}

/// Runs every seed of `cfg` and writes `metrics.csv`, `summary.json` and
/// `rounds.jsonl` into `out_dir`.
pub fn cmd_run(cfg: &ExperimentConfig, out_dir: &Path, threads: usize) -> Result<RunOutput> {
    let runs = run_all_seeds(cfg, threads)?;
    let csv_body = csv_rows(cfg.scheme, &runs);
    let summary = summarize(cfg.scheme, &runs, &cfg.checkpoints);

    let mut log = String::new();
    for run in &runs {
        for r in &run.reports {
            #[derive(Serialize)]
            struct Line<'a> {
                seed: u64,
                scheme: Scheme,
                #[serde(flatten)]
                report: &'a RoundReport,
            }
            let line = Line {
                seed: run.seed,
                scheme: cfg.scheme,
                report: r,
            };
            log.push_str(&serde_json::to_string(&line)?);
            log.push('\n');
        }
    }

    let csv = out_dir.join("metrics.csv");
    let summary_path = out_dir.join("summary.json");
    let rounds_log = out_dir.join("rounds.jsonl");
    write_atomic(&csv, &format!("{CSV_HEADER}\n{csv_body}"))?;
    write_atomic(&summary_path, &serde_json::to_string_pretty(&summary)?)?;
    write_atomic(&rounds_log, &log)?;
    Ok(RunOutput {
        csv,
        summary_path,
        rounds_log,
        summary,
        csv_body,
    })
}

/// Configs in a comparison may differ only in scheme and stale-index rule.
pub fn check_compatible(configs: &[ExperimentConfig]) -> Result<()> {
    let Some(first) = configs.first() else {
        return Err(HaflError::Empty("scheme list"));
    };
    let norm = |c: &ExperimentConfig| ExperimentConfig {
        scheme: first.scheme,
        stale_index_rule: first.stale_index_rule,
        ..c.clone()
    };
    let reference = norm(first).to_config_string();
    for c in &configs[1..] {
        let other = norm(c).to_config_string();
        if let Some((a, b)) = reference.lines().zip(other.lines()).find(|(a, b)| a != b) {
            let key = a.split('=').next().unwrap_or("").trim().to_string();
            return Err(HaflError::config(
                key,
                format!("compared configs disagree: `{a}` vs `{b}`"),
            ));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub scheme: Scheme,
    pub global_acc: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub round: usize,
    /// Best first.
    pub entries: Vec<RankEntry>,
}

#[derive(Debug, Clone)]
pub struct CompareOutput {
    pub csv: PathBuf,
    pub ranking_path: PathBuf,
    pub summaries: Vec<Summary>,
    pub rankings: Vec<Ranking>,
}

pub fn rank_at_checkpoints(summaries: &[Summary]) -> Vec<Ranking> {
    let mut rounds: Vec<usize> = summaries
        .iter()
        .flat_map(|s| s.checkpoints.iter().map(|c| c.round))
        .collect();
    rounds.sort_unstable();
    rounds.dedup();
    rounds
        .into_iter()
        .map(|round| {
            let mut entries: Vec<RankEntry> = summaries
                .iter()
                .filter_map(|s| {
                    s.checkpoints
                        .iter()
                        .find(|c| c.round == round)
                        .map(|c| RankEntry {
                            scheme: s.scheme,
                            global_acc: c.global_acc,
                        })
                })
                .collect();
            entries.sort_by(|a, b| b.global_acc.mean.total_cmp(&a.global_acc.mean));
            Ranking { round, entries }
        })
        .collect()
}

/// Runs each scheme on the same data and seeds. Every scheme's files go to
/// `out_dir/<scheme>/`; the merged `compare.csv` and `ranking.json` go to
/// `out_dir`.
pub fn cmd_compare(
    cfg: &ExperimentConfig,
    schemes: &[Scheme],
    out_dir: &Path,
    threads: usize,
) -> Result<CompareOutput> {
    let configs: Vec<ExperimentConfig> = schemes.iter().map(|s| cfg.with_scheme(*s)).collect();
    check_compatible(&configs)?;
    for c in &configs {
        c.validate()?;
    }
    let mut merged = format!("{CSV_HEADER}\n");
    let mut summaries = Vec::new();
    for c in &configs {
        let job = cmd_run(c, &out_dir.join(c.scheme.slug()), threads)?;
        merged.push_str(&job.csv_body);
        summaries.push(job.summary);
    }
    let rankings = rank_at_checkpoints(&summaries);
    let csv = out_dir.join("compare.csv");
    let ranking_path = out_dir.join("ranking.json");
    write_atomic(&csv, &merged)?;
    write_atomic(&ranking_path, &serde_json::to_string_pretty(&rankings)?)?;
    Ok(CompareOutput {
        csv,
        ranking_path,
        summaries,
        rankings,
    })
}

/// Human-readable ranking table.
pub fn format_rankings(rankings: &[Ranking]) -> String {
    let mut out = String::new();
    for r in rankings {
        let _ = writeln!(out, "round {}", r.round);
        for (pos, e) in r.entries.iter().enumerate() {
            let _ = writeln!(
                out,
                "  {}. {:<12} {:.4} ± {:.4}",
                pos + 1,
                e.scheme.to_string(),
                e.global_acc.mean,
                e.global_acc.std
            );
        }
    }
    out
}
