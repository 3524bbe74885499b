use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FeatureMap, RawFeatureStack, RawLayout};
use crate::error::{Result, UldError};
use crate::nn::{Activation, Conv, ParamId, ParamStore};
use crate::tape::{Mat, RowMix, Tape, Var};

/// Bilinear resize as a row-mixing operator over raster-ordered pixels,
/// using half-pixel centres with edge clamping. Equal sizes give the
/// identity.
pub fn bilinear_resize_mix(h_in: usize, w_in: usize, h_out: usize, w_out: usize) -> RowMix {
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = axis(h_in, h_out);
    let xs = axis(w_in, w_out);
    let mut rows = Vec::with_capacity(h_out * w_out);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let mut row: Vec<(usize, f64)> = Vec::with_capacity(4);
            for (yy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                for (xx, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                    let wgt = wy * wx;
                    if wgt == 0.0 {
                        continue;
                    }
                    let idx = yy * w_in + xx;
                    match row.iter_mut().find(|(j, _)| *j == idx) {
                        Some(entry) => entry.1 += wgt,
                        None => row.push((idx, wgt)),
                    }
                }
            }
            rows.push(row);
        }
    }
    RowMix {
        n_in: h_in * w_in,
        rows,
    }
}

/// Every `(layer, step)` grid resized to the aggregator resolution, in
/// raster-row form.
#[derive(Debug, Clone, PartialEq)]
pub struct UpscaledStack {
    pub height: usize,
    pub width: usize,
    pub maps: BTreeMap<(usize, usize), Mat>,
}

/// Resizes each grid of `raw` to `height x width`.
pub fn upscale_stack(raw: &RawFeatureStack, height: usize, width: usize) -> UpscaledStack {
    let mut mixes: BTreeMap<(usize, usize), Arc<RowMix>> = BTreeMap::new();
    let mut maps = BTreeMap::new();
    for m in &raw.maps {
        let (h, w, d) = m.grid.dim();
        let rows = Mat::from_shape_vec((h * w, d), m.grid.iter().copied().collect()).expect("row-major");
        let up = if (h, w) == (height, width) {
            rows
        } else {
            let mix = mixes
                .entry((h, w))
                .or_insert_with(|| Arc::new(bilinear_resize_mix(h, w, height, width)));
            mix.apply(&rows)
        };
        maps.insert((m.layer, m.step), up);
    }
    UpscaledStack {
        height,
        width,
        maps,
    }
}

/// Learnable part of the feature aggregator: one scalar mixing weight per
/// `(layer, step)` and one 1x1 bottleneck per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatorParams {
    pub store: ParamStore,
    /// Sorted `(layer, step)` pairs; `weights[i]` belongs to `combos[i]`.
    pub combos: Vec<(usize, usize)>,
    pub weights: Vec<ParamId>,
    /// Indexed by layer.
    pub bottlenecks: Vec<Conv>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

fn layer_channels(layout: &[RawLayout]) -> Result<Vec<usize>> {
    let n_layers = layout.iter().map(|l| l.layer + 1).max().unwrap_or(0);
    let mut ch = vec![0usize; n_layers];
    for l in layout {
        if ch[l.layer] != 0 && ch[l.layer] != l.channels {
            return Err(UldError::Config(format!(
                "layer {} declares both {} and {} channels",
                l.layer, ch[l.layer], l.channels
            )));
        }
        ch[l.layer] = l.channels;
    }
    if ch.contains(&0) {
        return Err(UldError::Config("feature layers must be numbered contiguously from 0".into()));
    }
    Ok(ch)
}

impl AggregatorParams {
    /// Random bottlenecks with `activation`, weights initialised to
    /// `1 / (number of combinations)`.
    pub fn new(
        layout: &[RawLayout],
        height: usize,
        width: usize,
        channels: usize,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        if layout.is_empty() {
            return Err(UldError::Config("aggregator needs at least one feature grid".into()));
        }
        let ch = layer_channels(layout)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let bottlenecks = ch
            .iter()
            .enumerate()
            .map(|(l, &c)| Conv::new(&mut store, &format!("agg.bottleneck{l}"), 1, 1, c, channels, activation, &mut rng))
            .collect();
        let mut combos: Vec<(usize, usize)> = layout.iter().map(|l| (l.layer, l.step)).collect();
        combos.sort_unstable();
        combos.dedup();
        let w0 = 1.0 / combos.len() as f64;
        let weights = combos
            .iter()
            .map(|(l, t)| store.add(format!("agg.mix.l{l}t{t}"), Mat::from_elem((1, 1), w0)))
            .collect();
        Ok(AggregatorParams {
            store,
            combos,
            weights,
            bottlenecks,
            height,
            width,
            channels,
        })
    }

    /// Identity bottlenecks (every layer must have `channels` channels).
    pub fn identity(layout: &[RawLayout], height: usize, width: usize) -> Result<Self> {
        let ch = layer_channels(layout)?;
        let c = ch[0];
        if ch.iter().any(|&x| x != c) {
            return Err(UldError::Config("identity bottlenecks need equal channel counts".into()));
        }
        let mut p = AggregatorParams::new(layout, height, width, c, Activation::Identity, 0)?;
        for b in p.bottlenecks.clone() {
            *p.store.get_mut(b.weight) = Mat::eye(c);
        }
        Ok(p)
    }

    pub fn weight(&self, layer: usize, step: usize) -> Option<f64> {
        self.index(layer, step).map(|i| self.store.get(self.weights[i])[[0, 0]])
    }

    pub fn set_weight(&mut self, layer: usize, step: usize, value: f64) -> Result<()> {
        let i = self
            .index(layer, step)
            .ok_or_else(|| UldError::Config(format!("no mixing weight for layer {layer} step {step}")))?;
        self.store.get_mut(self.weights[i])[[0, 0]] = value;
        Ok(())
    }

    fn index(&self, layer: usize, step: usize) -> Option<usize> {
        self.combos.binary_search(&(layer, step)).ok()
    }

    /// Records the aggregation of `up` on `tape`; returns an `(H*W) x D`
    /// variable.
    pub fn forward(&self, tape: &mut Tape, up: &UpscaledStack) -> Result<Var> {
        if (up.height, up.width) != (self.height, self.width) {
            return Err(UldError::shape(
                "aggregator input",
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", up.height, up.width),
            ));
        }
        for &(l, t) in up.maps.keys() {
            if self.index(l, t).is_none() {
                return Err(UldError::Config(format!("no mixing weight for layer {l} step {t}")));
            }
        }
        let mut acc: Option<Var> = None;
        for (i, &(l, t)) in self.combos.iter().enumerate() {
            let Some(x) = up.maps.get(&(l, t)) else {
                continue;
            };
            let b = &self.bottlenecks[l];
            if x.ncols() != b.c_in {
                return Err(UldError::shape(
                    "aggregator bottleneck input",
                    format!("{} channels for layer {l}", b.c_in),
                    x.ncols().to_string(),
                ));
            }
            let xv = tape.constant(x.clone());
            let y = b.forward(tape, &self.store, xv, self.height, self.width);
            let w = self.store.bind(tape, self.weights[i]);
            let term = tape.scale_by(y, w);
            acc = Some(match acc {
                Some(a) => tape.add(a, term),
                None => term,
            });
        }
        acc.ok_or_else(|| UldError::InvalidArgument("empty feature stack".into()))
    }
}

/// Weighted sum of bottlenecked, upscaled feature grids.
pub fn aggregate(raw: &RawFeatureStack, params: &AggregatorParams) -> Result<FeatureMap> {
    raw.validate()?;
    let up = upscale_stack(raw, params.height, params.width);
    let mut tape = Tape::new();
    let out = params.forward(&mut tape, &up)?;
    let rows = tape.value(out);
    let grid = Array3::from_shape_vec((params.height, params.width, params.channels), rows.iter().copied().collect())
        .expect("row-major");
    Ok(FeatureMap::new(grid, "aggregate"))
}
