use super::StoreError;

/// Boxes kept when every box is classified as no-object.
pub const FALLBACK_KEEP: usize = 4;

/// No-object mask over `rows` detector boxes with `classes` logits each.
pub fn detr_object_mask(logits: &[f32], classes: usize, no_object_index: usize) -> Result<Vec<bool>, StoreError> {
    let rows = if classes == 0 { 0 } else { logits.len() / classes };
    object_mask(logits, classes, no_object_index, &vec![true; rows])
}

/// Like [`detr_object_mask`], restricted to boxes whose `valid` flag is set.
/// Invalid boxes are never kept, and only valid boxes compete in the fallback.
pub fn object_mask(logits: &[f32], classes: usize, no_object_index: usize, valid: &[bool]) -> Result<Vec<bool>, StoreError> {
    let rows = valid.len();
    if classes == 0 || no_object_index >= classes || logits.len() != rows * classes {
        return Err(StoreError::Inconsistent(format!(
            "{} logits for {rows} boxes x {classes} classes (no-object {no_object_index})",
            logits.len()
        )));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(StoreError::NonFiniteLogits);
    }
    // Softmax is monotone, so the argmax of the logits is the argmax of the probabilities.
    let mut keep: Vec<bool> = logits
        .chunks(classes)
        .zip(valid)
        .map(|(row, &v)| v && argmax(row) != no_object_index)
        .collect();
    if keep.iter().any(|&k| k) {
        return Ok(keep);
    }
    let mut scored: Vec<(f64, usize)> = logits
        .chunks(classes)
        .enumerate()
        .filter(|&(i, _)| valid[i])
        .map(|(i, row)| (max_object_prob(row, no_object_index), i))
        .collect();
    // Descending probability, ascending index on ties.
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in scored.iter().take(FALLBACK_KEEP) {
        keep[i] = true;
    }
    Ok(keep)
}

/// Lowest index wins ties.
fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Largest softmax probability after removing the no-object class.
fn max_object_prob(row: &[f32], no_object_index: usize) -> f64 {
    let others = row.iter().enumerate().filter(|&(c, _)| c != no_object_index).map(|(_, &x)| x as f64);
    let m = others.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return 0.0;
    }
    let z: f64 = others.map(|x| (x - m).exp()).sum();
    1.0 / z
}
