//! Protocol and sweep runs spread over a rayon pool. Results are collected in
//! plan order, so the output does not depend on the worker count.

use gafl_core::eval::{finish_protocol, protocol_plan, run_trial, sweep_point, ProtocolReport, SweepParam, SweepPoint, TrialContext};
use gafl_core::{Dataset, EncoderParams, EvalConfig, Variant};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// `workers = 0` uses one thread per core.
fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Invalid(format!("cannot start {workers} workers: {e}")))
}

pub fn run_protocol(
    dataset: &Dataset,
    params: &EncoderParams,
    variants: &[Variant],
    cfg: &EvalConfig,
    workers: usize,
) -> Result<ProtocolReport> {
    cfg.validate()?;
    let ctx = TrialContext::new(dataset, params)?;
    let plan = protocol_plan(dataset, variants, cfg);
    let outcomes = pool(workers)?.install(|| {
        plan.par_iter().map(|s| run_trial(&ctx, &s.class, s.trial, s.variant, cfg)).collect::<Vec<_>>()
    });
    Ok(finish_protocol(dataset, &plan, outcomes)?)
}

/// Runs the "ours" protocol at every grid point, with all trials of all
/// points sharing one pool.
pub fn run_sweep(
    dataset: &Dataset,
    params: &EncoderParams,
    cfg: &EvalConfig,
    grid: &[(SweepParam, usize)],
    workers: usize,
) -> Result<Vec<SweepPoint>> {
    let ctx = TrialContext::new(dataset, params)?;
    let configs: Vec<EvalConfig> = grid.iter().map(|&(p, v)| p.apply(cfg, v)).collect();
    for c in &configs {
        c.validate()?;
    }
    let plans: Vec<_> = configs.iter().map(|c| protocol_plan(dataset, &[Variant::Ours], c)).collect();
    let work: Vec<(usize, usize)> =
        plans.iter().enumerate().flat_map(|(g, plan)| (0..plan.len()).map(move |t| (g, t))).collect();
    let mut outcomes = pool(workers)?.install(|| {
        work.par_iter()
            .map(|&(g, t)| {
                let s = &plans[g][t];
                run_trial(&ctx, &s.class, s.trial, s.variant, &configs[g])
            })
            .collect::<Vec<_>>()
    })
    .into_iter();
    let mut points = Vec::with_capacity(grid.len());
    for (g, &(parameter, value)) in grid.iter().enumerate() {
        let chunk: Vec<_> = outcomes.by_ref().take(plans[g].len()).collect();
        let report = finish_protocol(dataset, &plans[g], chunk)?;
        points.push(sweep_point(parameter, value, &report));
    }
    Ok(points)
}
