//! Visual in-degree centrality and its head/layer aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::store::DocumentBundleOf;
use crate::tensor::MatrixRef;

/// How per-head centralities are combined within a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadAggregation {
    Mean,
    Max,
}

fn check_visual(visual: &[usize], seq_len: usize) -> Result<()> {
    if let Some(&bad) = visual.iter().find(|&&v| v >= seq_len) {
        return Err(Error::invalid(format!(
            "visual index {bad} out of range for T={seq_len}"
        )));
    }
    Ok(())
}

/// Rows folded into one partial sum before it is widened into the `f64` accumulator.
const ROW_BLOCK: usize = 8;

/// Sums columns `start..start + acc.len()` over the rows listed in `rows`.
#[inline(always)]
fn column_sums_contiguous<S: Scalar>(slice: MatrixRef<'_, S>, rows: &[usize], start: usize, acc: &mut [f64]) {
    let n = acc.len();
    let mut part = vec![S::zero(); n];
    let window = |i: usize| &slice.row(i)[start..start + n];
    let mut blocks = rows.chunks_exact(ROW_BLOCK);
    for block in &mut blocks {
        let r: [&[S]; ROW_BLOCK] = std::array::from_fn(|b| window(block[b]));
        let (r0, r1, r2, r3) = (&r[0][..n], &r[1][..n], &r[2][..n], &r[3][..n]);
        let (r4, r5, r6, r7) = (&r[4][..n], &r[5][..n], &r[6][..n], &r[7][..n]);
        let part = &mut part[..n];
        for k in 0..n {
            part[k] = ((r0[k] + r1[k]) + (r2[k] + r3[k])) + ((r4[k] + r5[k]) + (r6[k] + r7[k]));
        }
        for (a, &p) in acc.iter_mut().zip(part.iter()) {
            *a += p.as_();
        }
    }
    for &i in blocks.remainder() {
        for (a, &v) in acc.iter_mut().zip(window(i)) {
            *a += v.as_();
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn column_sums_contiguous_avx2<S: Scalar>(
    slice: MatrixRef<'_, S>,
    rows: &[usize],
    start: usize,
    acc: &mut [f64],
) {
    column_sums_contiguous(slice, rows, start, acc)
}

fn column_sums_dispatch<S: Scalar>(slice: MatrixRef<'_, S>, rows: &[usize], start: usize, acc: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the required CPU feature was detected at runtime.
            unsafe { column_sums_contiguous_avx2(slice, rows, start, acc) };
            return;
        }
    }
    column_sums_contiguous(slice, rows, start, acc)
}

fn contiguous_start(visual: &[usize]) -> Option<usize> {
    let first = *visual.first()?;
    visual
        .iter()
        .enumerate()
        .all(|(k, &v)| v == first + k)
        .then_some(first)
}

/// Column sums of a `[T, T]` attention slice restricted to visual rows and
/// columns: `c_j = sum over i in V of A[i][j]`, for each `j` in `visual` order.
pub fn in_degree_centrality<S: Scalar>(slice: MatrixRef<'_, S>, visual: &[usize]) -> Result<Vec<f64>> {
    if slice.rows() != slice.cols() {
        return Err(Error::Dimension(format!(
            "attention slice must be square, got {}x{}",
            slice.rows(),
            slice.cols()
        )));
    }
    check_visual(visual, slice.rows())?;
    let mut acc = vec![0.0f64; visual.len()];
    match contiguous_start(visual) {
        Some(start) => column_sums_dispatch(slice, visual, start, &mut acc),
        None => {
            for &i in visual {
                let row = slice.row(i);
                for (a, &j) in acc.iter_mut().zip(visual) {
                    *a += row[j].as_();
                }
            }
        }
    }
    Ok(acc)
}

fn check_heads(per_head: &[Vec<f64>]) -> Result<usize> {
    let first = per_head
        .first()
        .ok_or_else(|| Error::invalid("at least one head is required"))?;
    let n = first.len();
    if let Some((h, v)) = per_head.iter().enumerate().find(|(_, v)| v.len() != n) {
        return Err(Error::Dimension(format!(
            "head {h} has {} scores, head 0 has {n}",
            v.len()
        )));
    }
    Ok(n)
}

/// Elementwise mean across heads.
pub fn aggregate_mean(per_head: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = check_heads(per_head)?;
    let mut out = vec![0.0; n];
    for head in per_head {
        for (o, &v) in out.iter_mut().zip(head) {
            *o += v;
        }
    }
    let h = per_head.len() as f64;
    out.iter_mut().for_each(|o| *o /= h);
    Ok(out)
}

/// Elementwise maximum across heads.
pub fn aggregate_max(per_head: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_heads(per_head)?;
    let mut out = per_head[0].clone();
    for head in &per_head[1..] {
        for (o, &v) in out.iter_mut().zip(head) {
            *o = o.max(v);
        }
    }
    Ok(out)
}

pub fn aggregate(per_head: &[Vec<f64>], how: HeadAggregation) -> Result<Vec<f64>> {
    match how {
        HeadAggregation::Mean => aggregate_mean(per_head),
        HeadAggregation::Max => aggregate_max(per_head),
    }
}

/// `floor(x)` that tolerates products such as `0.29 * 100 = 28.999999999999996`.
fn floor_product(x: f64) -> usize {
    (x + 1e-9).floor().max(0.0) as usize
}

/// 1-based layers whose relative depth lies in `[alpha, beta]`:
/// `max(1, floor(alpha*L)) ..= min(L, floor(beta*L))`.
///
/// The upper end is raised to the lower end when the floors collapse (only
/// possible for very shallow stacks), so the window is never empty.
pub fn layer_window(total_layers: usize, alpha: f64, beta: f64) -> Result<Vec<usize>> {
    if total_layers == 0 {
        return Err(Error::invalid("total layer count must be at least 1"));
    }
    if !(0.0..=1.0).contains(&alpha) || !(0.0..=1.0).contains(&beta) || alpha >= beta {
        return Err(Error::invalid(format!(
            "window bounds must satisfy 0 <= alpha < beta <= 1, got alpha={alpha}, beta={beta}"
        )));
    }
    let l = total_layers as f64;
    let lo = floor_product(alpha * l).max(1);
    let hi = floor_product(beta * l).min(total_layers).max(lo);
    Ok((lo..=hi).collect())
}

/// Aggregated centrality of one layer.
pub fn layer_scores<S: Scalar>(
    bundle: &DocumentBundleOf<S>,
    layer: usize,
    how: HeadAggregation,
) -> Result<Vec<f64>> {
    let att = &bundle.attention;
    let per_head = (0..att.num_heads())
        .map(|h| in_degree_centrality(att.slice(layer, h)?, &bundle.visual_indices))
        .collect::<Result<Vec<_>>>()?;
    aggregate(&per_head, how)
}

/// Layer-integrated structural score: the mean over `layers` of each layer's
/// head-aggregated centrality.
pub fn sap_scores_over<S: Scalar>(
    bundle: &DocumentBundleOf<S>,
    layers: &[usize],
    how: HeadAggregation,
) -> Result<Vec<f64>> {
    if layers.is_empty() {
        return Err(Error::invalid("layer set is empty"));
    }
    let mut total = vec![0.0; bundle.patch_count()];
    for &l in layers {
        let s = layer_scores(bundle, l, how)?;
        for (t, v) in total.iter_mut().zip(s) {
            *t += v;
        }
    }
    let n = layers.len() as f64;
    total.iter_mut().for_each(|t| *t /= n);
    Ok(total)
}

/// Final-layer attention from the EOS token to each visual patch, averaged over heads.
pub fn eos_scores<S: Scalar>(bundle: &DocumentBundleOf<S>) -> Result<Vec<f64>> {
    let eos = bundle.eos_index.ok_or_else(|| {
        Error::Missing(format!("document {} has no eos_index", bundle.doc_id))
    })?;
    let att = &bundle.attention;
    let last = att.num_layers();
    check_visual(&bundle.visual_indices, att.seq_len())?;
    let mut acc = vec![0.0f64; bundle.patch_count()];
    for h in 0..att.num_heads() {
        let row = att.slice(last, h)?.row(eos);
        for (a, &j) in acc.iter_mut().zip(&bundle.visual_indices) {
            *a += row[j].as_();
        }
    }
    let h = att.num_heads() as f64;
    acc.iter_mut().for_each(|a| *a /= h);
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::AttentionStack;
    use crate::tensor::TensorOf;

    fn hand_slice() -> Vec<f64> {
        vec![
            0.5, 0.2, 0.2, 0.1, //
            0.1, 0.6, 0.2, 0.1, //
            0.3, 0.3, 0.3, 0.1, //
            0.25, 0.25, 0.25, 0.25,
        ]
    }

    #[test]
    fn hand_column_sums() {
        let a = hand_slice();
        let c = in_degree_centrality(MatrixRef::new(4, 4, &a), &[0, 1, 2]).unwrap();
        let expect = [0.9, 1.1, 0.7];
        for (x, e) in c.iter().zip(expect) {
            assert!((x - e).abs() < 1e-12, "{c:?}");
        }
        // same result through the gather path
        let c2 = in_degree_centrality(MatrixRef::new(4, 4, &a), &[0, 2]).unwrap();
        assert!((c2[0] - 0.8).abs() < 1e-12 && (c2[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn identity_and_uniform() {
        let t = 5;
        let mut eye = vec![0.0f32; t * t];
        for i in 0..t {
            eye[i * t + i] = 1.0;
        }
        let c = in_degree_centrality(MatrixRef::new(t, t, &eye), &[1, 3, 4]).unwrap();
        assert_eq!(c, vec![1.0, 1.0, 1.0]);

        let uni = vec![1.0f64 / t as f64; t * t];
        let c = in_degree_centrality(MatrixRef::new(t, t, &uni), &[0, 1, 2]).unwrap();
        for v in c {
            assert!((v - 3.0 / 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn centrality_errors() {
        let a = vec![0.0f32; 6];
        assert!(in_degree_centrality(MatrixRef::new(2, 3, &a), &[0]).is_err());
        let a = vec![0.0f32; 4];
        assert!(in_degree_centrality(MatrixRef::new(2, 2, &a), &[2]).is_err());
    }

    #[test]
    fn head_aggregation() {
        let heads = vec![vec![1.0, 2.0, 3.0], vec![3.0, 2.0, 1.0]];
        assert_eq!(aggregate_mean(&heads).unwrap(), vec![2.0, 2.0, 2.0]);
        assert_eq!(aggregate_max(&heads).unwrap(), vec![3.0, 2.0, 3.0]);
        let same = vec![vec![0.3, 0.7]; 4];
        assert_eq!(aggregate_max(&same).unwrap(), vec![0.3, 0.7]);
        let m = aggregate_mean(&same).unwrap();
        assert!((m[0] - 0.3).abs() < 1e-15 && (m[1] - 0.7).abs() < 1e-15);
        let one = vec![vec![5.0, -1.0]];
        assert_eq!(aggregate_mean(&one).unwrap(), one[0]);
        assert_eq!(aggregate_max(&one).unwrap(), one[0]);
        assert!(aggregate_mean(&[]).is_err());
        assert!(aggregate_max(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn window_matches_backbone_table() {
        assert_eq!(layer_window(18, 0.4, 0.6).unwrap(), vec![7, 8, 9, 10]);
        assert_eq!(layer_window(28, 0.4, 0.6).unwrap(), (11..=16).collect::<Vec<_>>());
        assert_eq!(layer_window(36, 0.4, 0.6).unwrap(), (14..=21).collect::<Vec<_>>());
    }

    #[test]
    fn window_bounds() {
        assert!(layer_window(18, 0.5, 0.5).is_err());
        assert!(layer_window(18, 0.6, 0.4).is_err());
        assert!(layer_window(18, -0.1, 0.4).is_err());
        assert!(layer_window(18, 0.1, 1.1).is_err());
        assert!(layer_window(0, 0.4, 0.6).is_err());
        assert!(layer_window(18, f64::NAN, 0.6).is_err());
        assert_eq!(layer_window(10, 0.0, 1.0).unwrap(), (1..=10).collect::<Vec<_>>());
        assert_eq!(layer_window(1, 0.4, 0.6).unwrap(), vec![1]);
        assert_eq!(layer_window(100, 0.29, 0.3).unwrap(), vec![29, 30]);
    }

    fn two_head_bundle() -> DocumentBundleOf<f64> {
        // T=3, visual {0,1}, eos 2, one layer, two heads
        let h0 = [0.5, 0.5, 0.0, 0.5, 0.5, 0.0, 0.2, 0.6, 0.2];
        let h1 = [0.5, 0.5, 0.0, 0.5, 0.5, 0.0, 0.4, 0.2, 0.4];
        let data: Vec<f64> = h0.iter().chain(h1.iter()).copied().collect();
        DocumentBundleOf {
            doc_id: "d".into(),
            embeddings: TensorOf::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap(),
            attention: AttentionStack::from_tensor(TensorOf::new(vec![1, 2, 3, 3], data).unwrap())
                .unwrap(),
            visual_indices: vec![0, 1],
            eos_index: Some(2),
        }
    }

    #[test]
    fn eos_hand_average() {
        let s = eos_scores(&two_head_bundle()).unwrap();
        assert!((s[0] - 0.3).abs() < 1e-12 && (s[1] - 0.4).abs() < 1e-12, "{s:?}");
        let mut b = two_head_bundle();
        b.eos_index = None;
        assert!(matches!(eos_scores(&b), Err(Error::Missing(_))));
    }

    #[test]
    fn window_of_one_equals_layer_score() {
        let b = two_head_bundle();
        let s = sap_scores_over(&b, &[1], HeadAggregation::Max).unwrap();
        assert_eq!(s, layer_scores(&b, 1, HeadAggregation::Max).unwrap());
        assert!(sap_scores_over(&b, &[2], HeadAggregation::Max).is_err());
        assert!(sap_scores_over(&b, &[], HeadAggregation::Max).is_err());
    }
}
