use crate::store::{ParamSet, PruneMask};
use crate::{Error, Result};

/// Prunes the `⌊fraction·N⌋` parameters of smallest magnitude; among equal
/// magnitudes the lower index is pruned first.
pub fn prune_magnitude(ps: &ParamSet, fraction: f64) -> Result<PruneMask> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!(
            "prune fraction {fraction} is outside [0, 1)"
        )));
    }
    let n = ps.len();
    let n_pruned = ((fraction * n as f64).floor() as usize).min(n - 1);
    let values = ps.values();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].abs().total_cmp(&values[b].abs()).then(a.cmp(&b)));
    let mut kept = vec![true; n];
    for &i in &order[..n_pruned] {
        kept[i] = false;
    }
    PruneMask::new(kept)
}
