//! Deterministic point-cloud sampling and grouping.
//!
//! Farthest-point sampling (lexicographic start, lowest-index tie-break),
//! radius ball query (nearest-first, padded by repeating the nearest
//! member), and 3-nearest-neighbour interpolation plans. All distance
//! arithmetic runs in f64 on the f32 coordinates so ordering decisions
//! are stable and reproducible by an independent implementation.

use crate::error::{Error, Result};

#[inline]
fn d2(a: &[f32; 3], b: &[f32; 3]) -> f64 {
    let dx = a[0] as f64 - b[0] as f64;
    let dy = a[1] as f64 - b[1] as f64;
    let dz = a[2] as f64 - b[2] as f64;
    dx * dx + dy * dy + dz * dz
}

/// Farthest-point sampling of `k` indices.
///
/// Starts at the lexicographically smallest point `(x, y, z)`; each step
/// adds the point with the greatest distance to the selected set. All
/// ties resolve to the lowest index, making the result a pure function
/// of the point list.
pub fn farthest_point_sample(points: &[[f32; 3]], k: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::Data(format!(
            "farthest_point_sample: k={k} out of range for {n} points"
        )));
    }
    let mut start = 0usize;
    for (i, p) in points.iter().enumerate().skip(1) {
        if (p[0], p[1], p[2]) < (points[start][0], points[start][1], points[start][2]) {
            start = i;
        }
    }
    let mut selected = Vec::with_capacity(k);
    selected.push(start);
    let mut dist = vec![f64::INFINITY; n];
    let mut last = start;
    for _ in 1..k {
        let mut best = 0usize;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            let d = d2(&points[i], &points[last]);
            if d < dist[i] {
                dist[i] = d;
            }
            if dist[i] > best_d {
                best_d = dist[i];
                best = i;
            }
        }
        selected.push(best);
        last = best;
    }
    Ok(selected)
}

/// Radius neighbourhoods around each center, exactly `group_size` members.
///
/// Members are the points within `radius` of the center, nearest first
/// (ties by lower index), truncated to `group_size`; short groups pad by
/// repeating the first (nearest) member. Centers drawn from the cloud
/// always contain themselves at distance zero, so groups are never empty;
/// a center with no other neighbours yields its own index repeated.
pub fn ball_query(
    points: &[[f32; 3]],
    centers: &[usize],
    radius: f64,
    group_size: usize,
) -> Result<Vec<Vec<usize>>> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::Data(format!("ball_query: radius {radius} must be positive")));
    }
    if group_size == 0 {
        return Err(Error::Data("ball_query: group_size must be positive".into()));
    }
    let r2 = radius * radius;
    let mut groups = Vec::with_capacity(centers.len());
    for &c in centers {
        if c >= points.len() {
            return Err(Error::Data(format!(
                "ball_query: center index {c} out of range for {} points",
                points.len()
            )));
        }
        let pc = &points[c];
        let mut hits: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .filter_map(|(i, p)| {
                let d = d2(p, pc);
                (d <= r2).then_some((d, i))
            })
            .collect();
        // f64 distances of finite points: total order is safe.
        hits.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        if hits.is_empty() {
            return Err(Error::Data(format!(
                "ball_query: center {c} has no neighbours within {radius}"
            )));
        }
        hits.truncate(group_size);
        let mut group: Vec<usize> = hits.iter().map(|&(_, i)| i).collect();
        while group.len() < group_size {
            group.push(group[0]);
        }
        groups.push(group);
    }
    Ok(groups)
}

/// Interpolation source rows and weights for each query point: its three
/// nearest reference points (by distance, ties by lower index) with
/// inverse-distance weights `1 / (d + 1e-8)`, normalized to sum to one.
/// With fewer than three references, the nearest list repeats cyclically.
pub fn three_nn_plan(
    queries: &[[f32; 3]],
    refs: &[[f32; 3]],
) -> Result<(Vec<[usize; 3]>, Vec<[f64; 3]>)> {
    if refs.is_empty() {
        return Err(Error::Data("three_nn_plan: no reference points".into()));
    }
    let mut indices = Vec::with_capacity(queries.len());
    let mut weights = Vec::with_capacity(queries.len());
    for q in queries {
        let mut ds: Vec<(f64, usize)> = refs.iter().enumerate().map(|(i, r)| (d2(q, r), i)).collect();
        ds.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        let pick = |j: usize| ds[j % ds.len()];
        let chosen = [pick(0), pick(1), pick(2)];
        let mut w = [0.0f64; 3];
        let mut total = 0.0;
        for (j, &(dsq, _)) in chosen.iter().enumerate() {
            w[j] = 1.0 / (dsq.sqrt() + 1e-8);
            total += w[j];
        }
        for wj in &mut w {
            *wj /= total;
        }
        indices.push([chosen[0].1, chosen[1].1, chosen[2].1]);
        weights.push(w);
    }
    Ok((indices, weights))
}
