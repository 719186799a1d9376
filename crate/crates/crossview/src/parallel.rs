//! Thread-pool fan-out for evaluation and geocalibration. Results are
//! gathered in input order, and metric sums are exact fixed-point, so the
//! output does not depend on the thread count.

use crossview_core::geocalib::{check_offsets, geocalib_cell, GeocalibResult};
use crossview_core::synth::AlignedPair;
use crossview_core::train::{evaluate_aerial_pair, evaluate_pair, Metrics};
use crossview_core::{CrossViewModel, LabelMap, Tensor};
use rayon::prelude::*;

use crate::error::{Error, Result};

pub fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {threads} threads: {e}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Ground,
    Aerial,
}

pub fn evaluate(model: &CrossViewModel<f32>, data: &[AlignedPair], target: Target) -> Result<Metrics> {
    let parts = data
        .par_iter()
        .map(|p| match target {
            Target::Ground => evaluate_pair(model, p),
            Target::Aerial => evaluate_aerial_pair(model, p),
        })
        .collect::<crossview_core::Result<Vec<_>>>()?;
    let mut m = Metrics::new(model.config().classes);
    for p in &parts {
        m.merge(p);
    }
    Ok(m)
}

pub fn geocalibrate(
    model: &CrossViewModel<f32>,
    image: &Tensor<f32>,
    query: &LabelMap,
    offsets: &[(i64, i64)],
    grid: (usize, usize),
) -> Result<GeocalibResult> {
    check_offsets(image, offsets, model.config().backbone.input_size)?;
    let pdfs = offsets
        .par_iter()
        .map(|&off| geocalib_cell(model, image, query, off))
        .collect::<crossview_core::Result<Vec<_>>>()?;
    Ok(GeocalibResult::assemble(offsets.to_vec(), grid, pdfs)?)
}
