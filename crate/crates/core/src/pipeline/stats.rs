//! Per-arranger evaluation statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filtering::{melody_chroma_accuracy, midi_topline, F0Contour};
use crate::midi::{note_density, SecondsSequence};

pub struct CoverEval {
    pub sequence: SecondsSequence,
    pub arranger_id: usize,
    /// Reference melody of the source audio, when available.
    pub reference: Option<F0Contour>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrangerStats {
    pub arranger_id: usize,
    pub covers: usize,
    pub mean_density: f64,
    /// Population standard deviation.
    pub std_density: f64,
    pub amca: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub arrangers: Vec<ArrangerStats>,
    /// Mean melody chroma accuracy over every cover with a defined MCA.
    pub amca: Option<f64>,
    /// Covers whose MCA was undefined (reference without voiced frames).
    pub undefined_mca: usize,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Melody chroma accuracy of a cover against a reference contour.
pub fn cover_mca(sequence: &SecondsSequence, reference: &F0Contour) -> Result<f64> {
    melody_chroma_accuracy(reference, &midi_topline(sequence, &reference.times))
}

pub fn eval_stats(covers: &[CoverEval]) -> Result<EvalStats> {
    if covers.is_empty() {
        return Err(Error::Validation("no covers to evaluate".into()));
    }
    let mut groups: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut all_mca = Vec::new();
    let mut undefined_mca = 0;
    for c in covers {
        let entry = groups.entry(c.arranger_id).or_default();
        entry.0.push(note_density(&c.sequence)?);
        if let Some(r) = &c.reference {
            match cover_mca(&c.sequence, r) {
                Ok(m) => {
                    entry.1.push(m);
                    all_mca.push(m);
                }
                Err(Error::Undefined(_)) => undefined_mca += 1,
                Err(e) => return Err(e),
            }
        }
    }
    let arrangers = groups
        .into_iter()
        .map(|(arranger_id, (densities, mcas))| {
            let m = mean(&densities).expect("group is nonempty");
            let var =
                densities.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / densities.len() as f64;
            ArrangerStats {
                arranger_id,
                covers: densities.len(),
                mean_density: m,
                std_density: var.sqrt(),
                amca: mean(&mcas),
            }
        })
        .collect();
    Ok(EvalStats {
        arrangers,
        amca: mean(&all_mca),
        undefined_mca,
    })
}
