//! Multi-seed comparison tables. Each run writes its own directory under
//! `<out>/runs/`; a run whose `result.json` already matches the current
//! configuration is reused, so an interrupted ablation resumes where it
//! stopped.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::commands::{load_dataset, save_model, write_logs, Layout};
use super::manifest::{sha256_bytes, write_file, write_json, RunManifest};
use super::{parse_list, parse_variants, AblateArgs};
use crate::data::Dataset;
use crate::error::{NfsError, Result};
use crate::eval::EvalReport;
use crate::gates::gates_to_checkpoint;
use crate::pipeline::{run_variant, RunConfig, Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub label: String,
    pub seed: u64,
    pub config_digest: String,
    pub searched_stages: Vec<usize>,
    pub report: EvalReport,
    pub seconds: f64,
}

/// One line of a summary table; means are in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub rank1_mean: f64,
    pub map_mean: f64,
    pub seeds: Vec<u64>,
}

/// Every non-empty subset of `1..=stages`, smaller subsets first.
pub fn stage_subsets(stages: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = (1u32..(1 << stages))
        .map(|mask| (0..stages).filter(|i| mask & (1 << i) != 0).map(|i| i + 1).collect())
        .collect();
    out.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    out
}

struct Job {
    label: String,
    slug: String,
    variant: Variant,
    config: RunConfig,
}

fn stage_label(stages: &[usize]) -> String {
    stages.iter().map(usize::to_string).collect::<Vec<_>>().join("+")
}

fn run_one(dataset: &Dataset, job: &Job, seed: u64, dir: &Path) -> Result<RunResult> {
    let config_digest = sha256_bytes(serde_json::to_string(&(&job.config, job.variant))?.as_bytes());
    let result_path = dir.join("result.json");
    if let Ok(text) = std::fs::read_to_string(&result_path) {
        if let Ok(done) = serde_json::from_str::<RunResult>(&text) {
            if done.config_digest == config_digest && done.seed == seed {
                println!("{} seed {seed}: reusing {}", job.label, result_path.display());
                return Ok(done);
            }
        }
    }
    let run = run_variant(dataset, &job.config, job.variant, seed)?;
    let layout = Layout::new(dir)?;
    let mut manifest = RunManifest::new("ablate-run", seed, &job.config, dataset.digest());
    if let Some(split) = &run.split {
        manifest.split_digest = Some(sha256_bytes(serde_json::to_string(split)?.as_bytes()));
    }
    if let Some(search) = &run.search {
        let gates = layout.path("gates", "gates.nfs");
        gates_to_checkpoint(&gates, &search.derived)?;
        manifest.record(&layout.root, &gates)?;
        write_logs(&layout, &mut manifest, "search", &search.steps, &search.epochs)?;
    }
    write_logs(&layout, &mut manifest, "train", &run.train.steps, &run.train.epochs)?;
    save_model(&layout, &mut manifest, "model", &run.net, &job.config.data)?;
    let report_path = layout.path("reports", &format!("eval_{}.json", job.config.protocol.name()));
    write_json(&report_path, &run.report)?;
    manifest.record(&layout.root, &report_path)?;
    manifest.save(&layout.root)?;

    let result = RunResult {
        label: job.label.clone(),
        seed,
        config_digest,
        searched_stages: run.net.config().searched_stages.clone(),
        report: run.report,
        seconds: run.seconds,
    };
    // Written last: its presence marks the run as complete.
    write_json(&result_path, &result)?;
    println!(
        "{} seed {seed}: rank-1 {:.2} mAP {:.2} ({:.0}s)",
        job.label,
        100.0 * result.report.rank1,
        100.0 * result.report.map,
        result.seconds
    );
    Ok(result)
}

fn summarize(label: &str, results: &[RunResult]) -> AblationRow {
    let n = results.len().max(1) as f64;
    AblationRow {
        label: label.into(),
        rank1_mean: 100.0 * results.iter().map(|r| r.report.rank1).sum::<f64>() / n,
        map_mean: 100.0 * results.iter().map(|r| r.report.map).sum::<f64>() / n,
        seeds: results.iter().map(|r| r.seed).collect(),
    }
}

fn seeds_text(seeds: &[u64]) -> String {
    seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(" ")
}

pub fn table_csv(first_column: &str, rows: &[AblationRow]) -> String {
    let mut out = format!("{first_column},rank1_mean,map_mean,seeds\n");
    for r in rows {
        writeln!(out, "{},{:.4},{:.4},{}", r.label, r.rank1_mean, r.map_mean, seeds_text(&r.seeds)).expect("string write");
    }
    out
}

pub fn table_markdown(first_column: &str, rows: &[AblationRow]) -> String {
    let mut out = format!("| {first_column} | rank1_mean | map_mean | seeds |\n|---|---:|---:|---|\n");
    for r in rows {
        writeln!(out, "| {} | {:.2} | {:.2} | {} |", r.label, r.rank1_mean, r.map_mean, seeds_text(&r.seeds))
            .expect("string write");
    }
    out
}

pub fn ablate(args: &AblateArgs) -> Result<()> {
    let c = &args.common;
    let base = c.resolve()?;
    let seeds: Vec<u64> = parse_list("seed", &args.seeds)?;
    let jobs: Vec<Job> = if args.stage_table {
        stage_subsets(base.net.stage_count())
            .into_iter()
            .map(|stages| {
                let mut config = base.clone();
                config.net.searched_stages = stages.clone();
                Job {
                    label: stage_label(&stages),
                    slug: format!("stages_{}", stages.iter().map(usize::to_string).collect::<Vec<_>>().join("")),
                    variant: Variant { search: true, contrastive: true },
                    config,
                }
            })
            .collect()
    } else {
        parse_variants(&args.variants)?
            .into_iter()
            .map(|variant| Job {
                label: variant.name().into(),
                slug: variant.name().replace('+', "_"),
                variant,
                config: base.clone(),
            })
            .collect()
    };
    if jobs.iter().any(|j| j.variant.search && j.config.net.searched_stages.is_empty()) {
        return Err(NfsError::Config("search variants need at least one stage".into()));
    }

    let dataset = load_dataset(&base.data)?;
    let layout = Layout::new(&c.out)?;
    let mut manifest = RunManifest::new("ablate", c.seed, &base, dataset.digest());
    manifest.seeds = Some(seeds.clone());
    let mut rows = Vec::new();
    for job in &jobs {
        let mut results = Vec::new();
        for &seed in &seeds {
            let dir = c.out.join("runs").join(&job.slug).join(format!("seed{seed}"));
            let result = run_one(&dataset, job, seed, &dir)?;
            manifest.record(&layout.root, &dir.join("result.json"))?;
            results.push(result);
        }
        rows.push(summarize(&job.label, &results));
    }

    let (name, column) = if args.stage_table { ("stage_table", "stages") } else { ("ablation", "variant") };
    let csv = layout.path("reports", &format!("{name}.csv"));
    write_file(&csv, table_csv(column, &rows).as_bytes())?;
    manifest.record(&layout.root, &csv)?;
    let md = layout.path("reports", &format!("{name}.md"));
    let markdown = table_markdown(column, &rows);
    write_file(&md, markdown.as_bytes())?;
    manifest.record(&layout.root, &md)?;
    manifest.save(&layout.root)?;
    print!("{markdown}");
    Ok(())
}
