//! Combining the three views of a case into one conditioning sequence.
//!
//! * `average`: element-wise mean of the per-image token arrays.
//! * `concat`: the spatially aligned tokens of each image are placed side by
//!   side (`n × k·d`) and a two-layer projection head maps them back to
//!   `n × d`. Block order is always original, anomaly, reconstruction.
//! * `channel`: the grayscale images become the channels of one image that
//!   is encoded once.
//!
//! Dropping the anomaly map keeps shapes stable: average takes the mean of
//! the remaining arrays, channel (and concat on a three-block head)
//! substitutes the first remaining view.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore, Var};
use crate::backbone::VisualFeatures;
use crate::data::{Image, ImageTriple, Source};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionStrategy {
    Average,
    Concat,
    Channel,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 3] = [FusionStrategy::Average, FusionStrategy::Concat, FusionStrategy::Channel];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionStrategy::Average => "average",
            FusionStrategy::Concat => "concat",
            FusionStrategy::Channel => "channel",
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(FusionStrategy::Average),
            "concat" => Ok(FusionStrategy::Concat),
            "channel" => Ok(FusionStrategy::Channel),
            other => Err(Error::InvalidConfig(format!(
                "unknown fusion strategy {other:?} (expected average, concat or channel)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeatures {
    pub tokens: Matrix,
    pub strategy: FusionStrategy,
    pub sources_used: BTreeSet<Source>,
}

/// Two affine layers with GELU in between: `k·d → hidden → d`.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ProjectionHead {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_width: usize,
        hidden: usize,
        out_width: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{prefix}.fc1"), in_width, hidden, rng),
            fc2: Linear::new(store, &format!("{prefix}.fc2"), hidden, out_width, rng),
        }
    }

    pub fn in_width(&self) -> usize {
        self.fc1.in_dim
    }

    pub fn out_width(&self) -> usize {
        self.fc2.out_dim
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let width = g.shape(x).1;
        if width != self.in_width() {
            return Err(Error::HeadWidthMismatch {
                expected: self.in_width(),
                found: width,
            });
        }
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        Ok(self.fc2.forward(g, h))
    }
}

fn check_aligned(g: &Graph, parts: &[Var]) -> Result<()> {
    let first = parts
        .first()
        .ok_or_else(|| Error::ShapeMismatch("nothing to fuse".into()))?;
    let shape = g.shape(*first);
    for &p in &parts[1..] {
        if g.shape(p) != shape {
            return Err(Error::ShapeMismatch(format!(
                "cannot fuse {:?} with {:?}",
                shape,
                g.shape(p)
            )));
        }
    }
    Ok(())
}

pub fn average_vars(g: &mut Graph, parts: &[Var]) -> Result<Var> {
    check_aligned(g, parts)?;
    Ok(g.mean(parts))
}

pub fn concat_vars(g: &mut Graph, parts: &[Var], head: &ProjectionHead) -> Result<Var> {
    let first = parts
        .first()
        .ok_or_else(|| Error::ShapeMismatch("nothing to fuse".into()))?;
    let rows = g.shape(*first).0;
    if let Some(&p) = parts.iter().find(|&&p| g.shape(p).0 != rows) {
        return Err(Error::ShapeMismatch(format!(
            "concat needs aligned token counts, got {rows} and {}",
            g.shape(p).0
        )));
    }
    let width: usize = parts.iter().map(|&p| g.shape(p).1).sum();
    if width != head.in_width() {
        return Err(Error::HeadWidthMismatch {
            expected: head.in_width(),
            found: width,
        });
    }
    let regrouped = g.concat_cols(parts);
    head.forward(g, regrouped)
}

/// Element-wise mean of equally shaped feature arrays.
pub fn fuse_average(features: &[VisualFeatures]) -> Result<FusedFeatures> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let parts: Vec<Var> = features.iter().map(|f| g.input(f.tokens.clone())).collect();
    let out = average_vars(&mut g, &parts)?;
    Ok(FusedFeatures {
        tokens: g.value(out).clone(),
        strategy: FusionStrategy::Average,
        sources_used: features.iter().map(|f| f.source).collect(),
    })
}

/// Regroups aligned tokens to `n × k·d` and projects them through `head`.
pub fn fuse_concat(store: &ParamStore, features: &[VisualFeatures], head: &ProjectionHead) -> Result<FusedFeatures> {
    let mut g = Graph::new(store);
    let parts: Vec<Var> = features.iter().map(|f| g.input(f.tokens.clone())).collect();
    let out = concat_vars(&mut g, &parts, head)?;
    Ok(FusedFeatures {
        tokens: g.value(out).clone(),
        strategy: FusionStrategy::Concat,
        sources_used: features.iter().map(|f| f.source).collect(),
    })
}

/// Stacks the grayscale views as channels (original, anomaly,
/// reconstruction). A view missing from `sources` is replaced by the first
/// selected view in that order, so the result always has three channels.
pub fn fuse_channel(triple: &ImageTriple, sources: &BTreeSet<Source>) -> Result<Image> {
    let selected: Vec<Source> = Source::TRIPLE.into_iter().filter(|s| sources.contains(s)).collect();
    let fallback = *selected.first().ok_or(Error::EmptySources)?;
    let planes: Vec<Image> = Source::TRIPLE
        .iter()
        .map(|&s| {
            let chosen = if sources.contains(&s) { s } else { fallback };
            triple.image(chosen).to_grayscale()
        })
        .collect();
    let refs: Vec<&Image> = planes.iter().collect();
    Image::stack_channels(&refs)
}
