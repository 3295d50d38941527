use serde::{Deserialize, Serialize};

use super::config::ModelConfig;

/// Analytic floating-point operation counts of one inference pass.
///
/// A multiply-add counts as 2. Elementwise activations, normalizations and
/// softmax are omitted; they are linear in `N` as well and do not change
/// the shape of the curve.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopBreakdown {
    /// Scalar value and label maps, per cell.
    pub embed: u128,
    /// `O·W_dfe`; the only term independent of `N`.
    pub identities: u128,
    pub feature_axis: u128,
    pub afbm: u128,
    pub conv: u128,
    pub gla: u128,
    pub heads: u128,
}

impl FlopBreakdown {
    pub fn total(&self) -> u128 {
        self.embed + self.identities + self.feature_axis + self.afbm + self.conv + self.gla + self.heads
    }

    /// Terms that scale with the sample count.
    pub fn per_sample(&self) -> u128 {
        self.total() - self.identities
    }

    pub fn sample_axis(&self) -> u128 {
        self.afbm + self.conv + self.gla
    }
}

/// Counts for `n` rows of `cols` features (`cols + 1` tokens with the
/// label column).
pub fn flop_count(cfg: &ModelConfig, n: usize, cols: usize) -> FlopBreakdown {
    let n = n as u128;
    let t = cols as u128 + 1;
    let d = cfg.d as u128;
    let s = cfg.d_state as u128;
    let h = cfg.d_hidden as u128;
    let layers = cfg.layers as u128;
    let cells = n * t;

    // 1 → h → d map per cell, label column included
    let embed = cells * (2 * h + 2 * h * d);
    let identities = cols as u128 * (d / 4) * d * 2;

    // per token: Q, K, V, O projections 4·2d², scores and mixing 2·2·t·d,
    // FFN 2·2·d·d_ff
    let per_subblock = cells * (8 * d * d + 4 * t * d + 4 * d * cfg.d_ff as u128);
    let feature_axis = layers * cfg.feature_subblocks as u128 * per_subblock;

    let (mut afbm, mut conv, mut gla) = (0, 0, 0);
    if cfg.sample_axis {
        let directions: u128 = if cfg.bidirectional { 2 } else { 1 };
        let step = match cfg.scan_mode {
            crate::sampleaxis::ScanMode::Selective => 2 * d,
            crate::sampleaxis::ScanMode::TimeInvariant => 0,
        };
        // input map 2·d·S, recurrence 3·S, fusion 2·S·d per direction
        let per_cell = directions * (2 * d * s + 3 * s + 2 * s * d + step);
        afbm = layers * cfg.afbm_layers as u128 * cells * per_cell;
        conv = layers * cells * 2 * cfg.kernel as u128 * d;
        // four projections 4·2d², outer-product update 2d², readout 2d²
        gla = layers * cells * 12 * d * d;
    }

    let heads = n * (2 * d * h + 2 * h * cfg.max_classes as u128);

    FlopBreakdown {
        embed,
        identities,
        feature_axis,
        afbm,
        conv,
        gla,
        heads,
    }
}
