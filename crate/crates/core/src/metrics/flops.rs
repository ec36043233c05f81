//! Analytic FLOP model. One multiply-accumulate counts as 2 FLOPs;
//! normalization and softmax are folded into a `10·T·d` term per block.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// Dense layer over `T` rows (prediction heads).
    Linear,
    /// Attention block over `T` tokens, full recomputation.
    AttentionLayer,
    /// Attention block over `T` tokens whose query/key rows were cached.
    AttentionLayerCachedQk,
    /// One new token through a cached causal block; `T` is its position.
    CausalStep,
    /// One GRU update.
    GruStep,
    /// Query and key projections for `T` rows.
    QkProjection,
    /// Dot products of one key against `T` cached queries.
    ForwardScores,
    /// One step of the restart classifier.
    ArmStep,
}

/// Which part of the system an event belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    UniLayer,
    Features,
    BiLayer,
    UniHead,
    BiHead,
    Arm,
}

/// Dimensions the FLOP formulas depend on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopDims {
    pub d: u64,
    pub ffn: u64,
    pub labels: u64,
    pub arm_in: u64,
    pub arm_hidden: u64,
}

pub fn linear_flops(t: u64, d_in: u64, d_out: u64) -> u64 {
    2 * t * d_in * d_out
}

pub fn flop_model(kind: LayerKind, t: usize, dims: &FlopDims) -> u64 {
    let t = t as u64;
    let FlopDims { d, ffn, labels, .. } = *dims;
    let block = |t: u64| 8 * t * d * d + 4 * t * t * d + 4 * t * ffn * d + 10 * t * d;
    match kind {
        LayerKind::Linear => linear_flops(t, d, labels),
        LayerKind::AttentionLayer => block(t),
        LayerKind::AttentionLayerCachedQk => block(t) - 4 * t * d * d,
        LayerKind::CausalStep => 8 * d * d + 4 * ffn * d + 10 * d + 4 * t * d,
        LayerKind::GruStep => gru_flops(d, d),
        LayerKind::QkProjection => 4 * t * d * d,
        LayerKind::ForwardScores => 2 * t * d,
        LayerKind::ArmStep => gru_flops(dims.arm_in, dims.arm_hidden) + linear_flops(1, dims.arm_hidden, 1),
    }
}

pub fn gru_flops(d_in: u64, d_h: u64) -> u64 {
    6 * d_in * d_h + 6 * d_h * d_h
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopEvent {
    pub role: Role,
    pub kind: LayerKind,
    pub tokens: usize,
    pub flops: u64,
}

impl FlopEvent {
    pub fn new(role: Role, kind: LayerKind, tokens: usize, dims: &FlopDims) -> Self {
        FlopEvent {
            role,
            kind,
            tokens,
            flops: flop_model(kind, tokens, dims),
        }
    }
}

/// Append-only list of FLOP events.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopLedger {
    events: Vec<FlopEvent>,
}

impl FlopLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, e: FlopEvent) {
        self.events.push(e);
    }

    pub fn extend(&mut self, es: impl IntoIterator<Item = FlopEvent>) {
        self.events.extend(es);
    }

    pub fn events(&self) -> &[FlopEvent] {
        &self.events
    }

    pub fn total(&self) -> u64 {
        self.events.iter().map(|e| e.flops).sum()
    }

    pub fn total_for(&self, role: Role) -> u64 {
        self.events.iter().filter(|e| e.role == role).map(|e| e.flops).sum()
    }
}
