//! Flat parameter vectors, the layer registry that indexes them, and the
//! delta algebra the federated protocol is built on.
//!
//! Every model exposes its parameters as one contiguous `f64` buffer. A
//! [`Layout`] records which slice belongs to which layer and which layers form
//! the output head, the only part of a delta used for personalized aggregation.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{self, NORM_FLOOR};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClientId(pub u32);

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "client:{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Recurrent,
    Dense,
    OutputHead,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub offset: usize,
    pub length: usize,
    pub kind: LayerKind,
}

/// Ordered, contiguous registry of the layers inside a [`ParameterVector`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Layout {
    layers: Vec<LayerSpec>,
    total: usize,
    head_len: usize,
}

impl Layout {
    /// Validates that `layers` tile `[0, total)` without gaps or overlaps.
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        let mut expected = 0usize;
        for layer in &layers {
            if layer.offset != expected {
                return Err(Error::config(format!(
                    "layer `{}` starts at {} but the previous layer ends at {}",
                    layer.name, layer.offset, expected
                )));
            }
            expected += layer.length;
        }
        let head_len = layers
            .iter()
            .filter(|l| l.kind == LayerKind::OutputHead)
            .map(|l| l.length)
            .sum();
        Ok(Self {
            layers,
            total: expected,
            head_len,
        })
    }

    pub fn builder() -> LayoutBuilder {
        LayoutBuilder::default()
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Total parameter count |θ|.
    pub fn total(&self) -> usize {
        self.total
    }

    pub fn head_len(&self) -> usize {
        self.head_len
    }

    pub fn has_head(&self) -> bool {
        self.head_len > 0
    }

    /// Fraction of parameters that belong to the output head.
    pub fn head_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.head_len as f64 / self.total as f64
        }
    }

    pub fn head_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| l.kind == LayerKind::OutputHead)
    }

    fn require_head(&self) -> Result<()> {
        if self.has_head() {
            Ok(())
        } else {
            Err(Error::config("layout has no output-head layer"))
        }
    }
}

#[derive(Default)]
pub struct LayoutBuilder {
    layers: Vec<LayerSpec>,
    offset: usize,
}

impl LayoutBuilder {
    pub fn push(mut self, name: impl Into<String>, length: usize, kind: LayerKind) -> Self {
        self.layers.push(LayerSpec {
            name: name.into(),
            offset: self.offset,
            length,
            kind,
        });
        self.offset += length;
        self
    }

    pub fn build(self) -> Layout {
        Layout::new(self.layers).expect("builder produces contiguous layers")
    }
}

/// Model parameters in flat, layer-indexed form.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl ParameterVector {
    pub fn new(values: Vec<f64>, layout: Arc<Layout>) -> Result<Self> {
        if values.len() != layout.total() {
            return Err(Error::shape(format!(
                "{} values for a layout of {} parameters",
                values.len(),
                layout.total()
            )));
        }
        if !numeric::all_finite(&values) {
            return Err(Error::numeric("parameter vector contains non-finite entries"));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        Self {
            values: vec![0.0; layout.total()],
            layout,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access for optimizers. Callers must keep entries finite.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layer_slice(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .layer(name)
            .map(|l| &self.values[l.offset..l.offset + l.length])
    }

    fn check_same_layout(&self, other: &ParameterVector) -> Result<()> {
        if Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout {
            Ok(())
        } else {
            Err(Error::shape("parameter vectors have different layouts"))
        }
    }
}

/// A client's uplink payload for one round.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaUpdate {
    pub full: ParameterVector,
    pub head: Vec<f64>,
    pub round: u64,
    pub client_id: ClientId,
}

impl DeltaUpdate {
    pub fn head(&self) -> &[f64] {
        &self.head
    }

    /// Fraction of the full delta that the head represents.
    pub fn head_fraction(&self) -> f64 {
        self.head.len() as f64 / self.full.len() as f64
    }
}

/// `private - global`, together with its head slice.
pub fn compute_delta(
    private: &ParameterVector,
    global: &ParameterVector,
    round: u64,
    client_id: ClientId,
) -> Result<DeltaUpdate> {
    private.check_same_layout(global)?;
    let values = private
        .values
        .iter()
        .zip(&global.values)
        .map(|(p, g)| p - g)
        .collect::<Vec<_>>();
    if !numeric::all_finite(&values) {
        return Err(Error::numeric(format!("non-finite delta for {client_id}")));
    }
    let full = ParameterVector {
        values,
        layout: private.layout.clone(),
    };
    let head = select_head(&full)?;
    Ok(DeltaUpdate {
        full,
        head,
        round,
        client_id,
    })
}

/// Concatenation of the output-head slices, in layout order.
pub fn select_head(params: &ParameterVector) -> Result<Vec<f64>> {
    params.layout.require_head()?;
    let mut head = Vec::with_capacity(params.layout.head_len());
    for layer in params.layout.head_layers() {
        head.extend_from_slice(&params.values[layer.offset..layer.offset + layer.length]);
    }
    Ok(head)
}

/// Inverse of [`select_head`]: writes `head` into the head slices of a copy of `template`.
pub fn scatter_head(template: &ParameterVector, head: &[f64]) -> Result<ParameterVector> {
    template.layout.require_head()?;
    if head.len() != template.layout.head_len() {
        return Err(Error::shape(format!(
            "head vector has {} entries, layout head has {}",
            head.len(),
            template.layout.head_len()
        )));
    }
    let mut out = template.clone();
    let mut cursor = 0;
    for layer in template.layout.head_layers() {
        out.values[layer.offset..layer.offset + layer.length]
            .copy_from_slice(&head[cursor..cursor + layer.length]);
        cursor += layer.length;
    }
    Ok(out)
}

/// Uniform average of the full deltas, `(1/N) Σ Δᵢ`.
///
/// Each coordinate is reduced with an order-invariant sum, so the result does
/// not depend on the order clients are listed in.
pub fn mean_deltas(deltas: &[DeltaUpdate]) -> Result<ParameterVector> {
    if deltas.is_empty() {
        return Err(Error::usage("cannot average an empty list of deltas"));
    }
    let weights = vec![1.0; deltas.len()];
    weighted_mean_deltas(deltas, &weights)
}

/// `Σ λᵢ Δᵢ / Σ λᵢ` for non-negative weights with a positive sum.
pub fn weighted_mean_deltas(deltas: &[DeltaUpdate], weights: &[f64]) -> Result<ParameterVector> {
    let Some(first) = deltas.first() else {
        return Err(Error::usage("cannot average an empty list of deltas"));
    };
    if weights.len() != deltas.len() {
        return Err(Error::shape(format!(
            "{} weights for {} deltas",
            weights.len(),
            deltas.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::usage("weights must be finite and non-negative"));
    }
    let mut wbuf = weights.to_vec();
    let wsum = numeric::order_invariant_sum(&mut wbuf);
    if wsum <= 0.0 {
        return Err(Error::usage("weights sum to zero"));
    }
    for d in &deltas[1..] {
        first.full.check_same_layout(&d.full)?;
    }
    let uniform = weights.iter().all(|w| *w == weights[0]);
    let n = first.full.len();
    let mut column = vec![0.0; deltas.len()];
    let mut values = Vec::with_capacity(n);
    for idx in 0..n {
        for (slot, (d, w)) in column.iter_mut().zip(deltas.iter().zip(weights)) {
            *slot = if uniform { d.full.values[idx] } else { w * d.full.values[idx] };
        }
        let s = numeric::order_invariant_sum(&mut column);
        values.push(if uniform {
            s / deltas.len() as f64
        } else {
            s / wsum
        });
    }
    Ok(ParameterVector {
        values,
        layout: first.full.layout.clone(),
    })
}

/// `base + step · delta`.
pub fn add_scaled(base: &ParameterVector, delta: &[f64], step: f64) -> Result<ParameterVector> {
    if delta.len() != base.len() {
        return Err(Error::shape(format!(
            "delta has {} entries, base has {}",
            delta.len(),
            base.len()
        )));
    }
    let values = base
        .values
        .iter()
        .zip(delta)
        .map(|(b, d)| b + step * d)
        .collect::<Vec<_>>();
    if !numeric::all_finite(&values) {
        return Err(Error::numeric("non-finite result in scaled update"));
    }
    Ok(ParameterVector {
        values,
        layout: base.layout.clone(),
    })
}

/// Cosine of the angle between `a` and `b`; 0 when either norm is below 1e-12.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "cosine of vectors with {} and {} entries",
            a.len(),
            b.len()
        )));
    }
    let (na2, nb2) = (numeric::norm_sq(a), numeric::norm_sq(b));
    if na2.sqrt() < NORM_FLOOR || nb2.sqrt() < NORM_FLOOR {
        return Ok(0.0);
    }
    // sqrt of the product keeps cos(a, a) exactly 1
    let mut denom = (na2 * nb2).sqrt();
    if !denom.is_finite() || denom == 0.0 {
        denom = na2.sqrt() * nb2.sqrt();
    }
    Ok((numeric::dot(a, b) / denom).clamp(-1.0, 1.0))
}
