//! Line-delimited dump of where the sampler looked.
//!
//! One JSON object per line:
//! `{"query_id":0,"layer":0,"head":1,"point":3,"location":[t,y,x],"weight":0.12}`.
//! Locations are clamped to the unit cube, weights are the softmax weights
//! of the point within its head.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::SampledTokenSet;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub query_id: usize,
    pub layer: usize,
    pub head: usize,
    pub point: usize,
    pub location: [f64; 3],
    pub weight: f64,
}

pub fn records(set: &SampledTokenSet) -> Vec<SampleRecord> {
    let mut out = Vec::new();
    for layer in 0..set.layers.len() {
        for query_id in 0..set.num_tokens() {
            for head in 0..set.num_heads {
                for point in 0..set.num_points {
                    out.push(SampleRecord {
                        query_id,
                        layer,
                        head,
                        point,
                        location: set.location(layer, query_id, head, point),
                        weight: set.weight(layer, query_id, head, point),
                    });
                }
            }
        }
    }
    out
}

pub fn write_records<W: Write>(set: &SampledTokenSet, mut out: W) -> Result<usize> {
    let recs = records(set);
    for r in &recs {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(recs.len())
}

pub fn read_records<R: BufRead>(input: R) -> Result<Vec<SampleRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
