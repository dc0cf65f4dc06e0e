use crate::error::{Error, Result};

/// The pseudo-label threshold and the confidences gathered this epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfidenceState {
    /// Starts at 0 so nothing is masked before the first epoch completes.
    pub beta: f64,
    pub collected_max_probs: Vec<f64>,
}

impl ConfidenceState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn collect(&mut self, probs: &[f64]) {
        self.collected_max_probs.extend_from_slice(probs);
    }
}

/// Nearest-rank percentile: ascending sort, index `ceil(p / 100 * N) - 1`.
pub fn nearest_rank_percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    // p * N is exact for the integral percentiles in use, so the ceiling is too.
    let rank = (p * sorted.len() as f64 / 100.0).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Epoch-end update: `beta` becomes the `p`-th percentile of what was
/// collected and the collection is cleared. Nothing collected leaves `beta`
/// unchanged.
pub fn update_confidence_threshold(state: &mut ConfidenceState, p: f64) -> Result<f64> {
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::config("percentile_p", format!("must lie in (0, 100], got {p}")));
    }
    if let Some(b) = nearest_rank_percentile(&state.collected_max_probs, p) {
        state.beta = b;
    }
    state.collected_max_probs.clear();
    Ok(state.beta)
}
