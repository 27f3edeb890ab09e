use super::language::LanguageSpec;
use crate::error::{ensure, Result};
use crate::tensor::Tensor;

/// Column means; for whole-symbol regions this estimates the speaker offset.
pub fn estimate_offset(frames: &Tensor) -> Vec<f32> {
    let (n, d) = frames.shape();
    let mut out = vec![0.0f64; d];
    for r in 0..n {
        for (o, &v) in out.iter_mut().zip(frames.row(r)) {
            *o += v as f64;
        }
    }
    out.into_iter().map(|v| (v / n.max(1) as f64) as f32).collect()
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn segment_cost(frames: &Tensor, start: usize, offset: &[f32], template: &Tensor) -> f64 {
    let mut c = 0.0f64;
    for l in 0..template.rows() {
        for ((&x, &o), &t) in frames.row(start + l).iter().zip(offset).zip(template.row(l)) {
            c += ((x - o - t) as f64).powi(2);
        }
    }
    c
}

/// Recover the transcript of `frames`. Fixed-length languages are cut into
/// equal segments; otherwise a dynamic program picks the cheapest tiling by
/// per-segment squared error. Ties go to the lowest symbol.
pub fn oracle_transcribe(frames: &Tensor, spec: &LanguageSpec) -> Result<Vec<usize>> {
    ensure!(frames.cols() == spec.d_mel, Input, "frames have {} features, expected {}", frames.cols(), spec.d_mel);
    let n = frames.rows();
    let offset = estimate_offset(frames);
    let templates: Vec<Tensor> = (0..spec.alphabet).map(|k| spec.template(k)).collect();
    let best_symbol = |start: usize, len: usize| -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for (k, t) in templates.iter().enumerate() {
            if t.rows() == len {
                let c = segment_cost(frames, start, &offset, t);
                if c < best.1 {
                    best = (k, c);
                }
            }
        }
        best
    };
    if spec.is_fixed_length() {
        let l = spec.frame_lengths[0];
        ensure!(n % l == 0, Input, "{n} frames is not a multiple of the symbol length {l}");
        return Ok((0..n / l).map(|i| best_symbol(i * l, l).0).collect());
    }
    let mut lengths: Vec<usize> = spec.frame_lengths.clone();
    lengths.sort_unstable();
    lengths.dedup();
    // cost[i]: best tiling of frames[..i]; back[i]: (previous end, symbol).
    let mut cost = vec![f64::INFINITY; n + 1];
    let mut back = vec![(0usize, 0usize); n + 1];
    cost[0] = 0.0;
    for end in 1..=n {
        for &len in &lengths {
            if len > end || !cost[end - len].is_finite() {
                continue;
            }
            let (k, c) = best_symbol(end - len, len);
            let total = cost[end - len] + c;
            if total < cost[end] {
                cost[end] = total;
                back[end] = (end - len, k);
            }
        }
    }
    ensure!(cost[n].is_finite(), Input, "{n} frames cannot be tiled by symbol lengths {lengths:?}");
    let mut out = Vec::new();
    let mut i = n;
    while i > 0 {
        let (prev, k) = back[i];
        out.push(k);
        i = prev;
    }
    out.reverse();
    Ok(out)
}

/// Symbol errors between a hypothesis and its reference. Equal-length pairs
/// are already aligned by the segmenting oracle, so only substitutions count;
/// otherwise the edit distance is used.
pub fn symbol_errors(hyp: &[usize], reference: &[usize]) -> usize {
    if hyp.len() == reference.len() {
        hyp.iter().zip(reference).filter(|(a, b)| a != b).count()
    } else {
        strsim::generic_levenshtein(&hyp.to_vec(), &reference.to_vec())
    }
}

/// Errors over the reference length, capped at 1.
pub fn symbol_error_rate(hyp: &[usize], reference: &[usize]) -> f64 {
    if reference.is_empty() {
        return if hyp.is_empty() { 0.0 } else { 1.0 };
    }
    (symbol_errors(hyp, reference) as f64 / reference.len() as f64).min(1.0)
}

/// Corpus-level rate: total edits over total reference symbols.
pub fn corpus_ser(pairs: &[(Vec<usize>, Vec<usize>)]) -> f64 {
    let edits: usize = pairs.iter().map(|(h, r)| symbol_errors(h, r)).sum();
    let total: usize = pairs.iter().map(|(_, r)| r.len()).sum();
    if total == 0 {
        0.0
    } else {
        (edits as f64 / total as f64).min(1.0)
    }
}
