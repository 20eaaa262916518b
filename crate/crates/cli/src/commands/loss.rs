//! `mrank loss pkto|kto|dpo|gradcheck`: evaluate preference losses over
//! precomputed log-probability batches.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Deserialize;

use mrank_core::loss::{
    dpo_loss, finite_difference_check, kto_loss, pkto_loss, DpoConvention, DpoPair, LogProbPair,
    LossConfig, LossOp, PktoSample, Quality, ZRefMode,
};

use crate::manifest::write_report;

use super::Global;

pub struct LossArgs {
    pub op: LossOp,
    pub batch: PathBuf,
    pub beta: f64,
    pub lambda_high: f64,
    pub lambda_low: f64,
    pub z_ref_mode: ZRefChoice,
    pub z_ref: Option<f64>,
    pub mismatch_seed: Option<u64>,
    pub convention: DpoConvention,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZRefChoice {
    Zero,
    Batch,
    Supplied,
}

fn resolve_z_ref(args_mode: ZRefChoice, z_ref: Option<f64>, seed: u64) -> Result<ZRefMode> {
    match args_mode {
        ZRefChoice::Zero => Ok(ZRefMode::Zero),
        ZRefChoice::Batch => Ok(ZRefMode::BatchEstimate { seed }),
        ZRefChoice::Supplied => {
            let value = z_ref.context("--z-ref-mode supplied needs --z-ref VALUE")?;
            Ok(ZRefMode::Supplied { value })
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRow {
    id: String,
    policy_logprob: f64,
    reference_logprob: f64,
    quality: Quality,
}

pub fn load_sample_batch(path: &Path) -> Result<Vec<PktoSample>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("failed to read batch {}", path.display()))?;
    let mut batch = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: SampleRow = serde_json::from_str(line)
            .with_context(|| format!("{}:{}", path.display(), idx + 1))?;
        batch.push(
            PktoSample::new(
                row.id,
                row.policy_logprob,
                row.reference_logprob,
                row.quality,
            )
            .with_context(|| format!("{}:{}", path.display(), idx + 1))?,
        );
    }
    Ok(batch)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DpoRow {
    id: String,
    good: LogProbPair,
    bad: LogProbPair,
}

pub fn load_dpo_batch(path: &Path) -> Result<Vec<DpoPair>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("failed to read batch {}", path.display()))?;
    let mut pairs = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: DpoRow = serde_json::from_str(line)
            .with_context(|| format!("{}:{}", path.display(), idx + 1))?;
        pairs.push(
            DpoPair::new(row.id, row.good, row.bad)
                .with_context(|| format!("{}:{}", path.display(), idx + 1))?,
        );
    }
    Ok(pairs)
}

pub async fn run(global: &Global, args: LossArgs) -> Result<()> {
    let seed = args.mismatch_seed.unwrap_or(global.seed);
    let z_ref = resolve_z_ref(args.z_ref_mode, args.z_ref, seed)?;
    let cfg = LossConfig::new(args.beta, args.lambda_high, args.lambda_low, z_ref)
        .map_err(|e| anyhow!(e))?;

    let loss_value = match args.op {
        LossOp::Pkto | LossOp::Kto => {
            let batch = load_sample_batch(&args.batch)?;
            let report = match args.op {
                LossOp::Pkto => pkto_loss(&batch, &cfg),
                LossOp::Kto => kto_loss(&batch, &cfg),
                LossOp::Dpo => unreachable!(),
            }
            .map_err(|e| anyhow!(e))?;
            let loss = report.loss;
            write_report(
                &args.out,
                &report,
                seed,
                global.config_path.as_deref(),
                std::slice::from_ref(&args.batch),
            )?;
            loss
        }
        LossOp::Dpo => {
            let pairs = load_dpo_batch(&args.batch)?;
            let report = dpo_loss(&pairs, args.beta, args.convention).map_err(|e| anyhow!(e))?;
            let loss = report.loss;
            write_report(
                &args.out,
                &report,
                seed,
                global.config_path.as_deref(),
                std::slice::from_ref(&args.batch),
            )?;
            loss
        }
    };

    println!(
        "loss {:?}: {loss_value:.6} -> {}",
        args.op,
        args.out.display()
    );
    Ok(())
}

pub struct GradCheckArgs {
    pub op: LossOp,
    pub batch: PathBuf,
    pub beta: f64,
    pub lambda_high: f64,
    pub lambda_low: f64,
    pub z_ref: Option<f64>,
    pub convention: DpoConvention,
    pub h: f64,
    pub tol: f64,
    pub out: Option<PathBuf>,
}

pub async fn gradcheck(global: &Global, args: GradCheckArgs) -> Result<()> {
    let z_ref = match args.z_ref {
        Some(value) => ZRefMode::Supplied { value },
        None => ZRefMode::Zero,
    };
    let cfg = LossConfig::new(args.beta, args.lambda_high, args.lambda_low, z_ref)
        .map_err(|e| anyhow!(e))?;

    let (batch, pairs) = match args.op {
        LossOp::Dpo => (Vec::new(), load_dpo_batch(&args.batch)?),
        _ => (load_sample_batch(&args.batch)?, Vec::new()),
    };
    let report = finite_difference_check(
        args.op,
        &batch,
        &pairs,
        &cfg,
        args.convention,
        args.h,
        args.tol,
    )
    .map_err(|e| anyhow!(e))?;

    if let Some(out) = &args.out {
        write_report(
            out,
            &report,
            global.seed,
            global.config_path.as_deref(),
            std::slice::from_ref(&args.batch),
        )?;
    }
    println!(
        "gradcheck {:?}: {} (max relative deviation {:.3e}, tolerance {:.1e})",
        args.op,
        if report.passed { "PASS" } else { "FAIL" },
        report.max_relative_deviation,
        report.tolerance
    );
    if !report.passed {
        bail!("gradient check failed");
    }
    Ok(())
}
