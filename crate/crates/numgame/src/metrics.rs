//! Analysis of emergent codes: accuracy, entropies over (numerosity,
//! message) tables, sketch discretisation via k-means, mapping and
//! dissimilarity matrices, span correlation, and generalisation reports.
//!
//! Everything here is a pure function over already-collected episode data;
//! nothing touches agents or parameters. Entropies are plug-in
//! (maximum-likelihood) estimates in bits.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::agents::StrokeSet;
use crate::raster::Raster;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty code table")]
    EmptyTable,

    #[error("no records after filtering")]
    EmptySelection,

    #[error("need at least {k} points for {k} clusters, got {n}")]
    TooFewPoints { k: usize, n: usize },

    #[error("class {class} has no members")]
    MissingClass { class: u32 },
}

// ---- code tables and entropies ----------------------------------------------

/// Empirical joint distribution over (numerosity, message key) pairs.
///
/// Pairs are kept in insertion order so that mapping-matrix columns can be
/// ordered by first occurrence; counts are derived on demand.
#[derive(Clone, Debug, Default)]
pub struct CodeTable {
    pairs: Vec<(u32, String)>,
}

/// Plug-in entropy in bits of a count vector.
fn entropy_bits<I: IntoIterator<Item = usize>>(counts: I, total: usize) -> f64 {
    let t = total as f64;
    counts
        .into_iter()
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / t;
            -p * p.log2()
        })
        .sum()
}

impl CodeTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs<I: IntoIterator<Item = (u32, String)>>(pairs: I) -> Self {
        Self { pairs: pairs.into_iter().collect() }
    }

    pub fn add(&mut self, class: u32, key: impl Into<String>) {
        self.pairs.push((class, key.into()));
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(u32, String)] {
        &self.pairs
    }

    fn joint_counts(&self) -> BTreeMap<(u32, &str), usize> {
        let mut m = BTreeMap::new();
        for (n, k) in &self.pairs {
            *m.entry((*n, k.as_str())).or_insert(0) += 1;
        }
        m
    }

    pub fn message_counts(&self) -> BTreeMap<&str, usize> {
        let mut m = BTreeMap::new();
        for (_, k) in &self.pairs {
            *m.entry(k.as_str()).or_insert(0) += 1;
        }
        m
    }

    fn class_counts(&self) -> BTreeMap<u32, usize> {
        let mut m = BTreeMap::new();
        for (n, _) in &self.pairs {
            *m.entry(*n).or_insert(0) += 1;
        }
        m
    }

    /// `H(N)` in bits.
    pub fn class_entropy(&self) -> Result<f64, MetricsError> {
        if self.pairs.is_empty() {
            return Err(MetricsError::EmptyTable);
        }
        Ok(entropy_bits(self.class_counts().into_values(), self.pairs.len()))
    }

    /// `H(M)` in bits.
    pub fn message_entropy(&self) -> Result<f64, MetricsError> {
        if self.pairs.is_empty() {
            return Err(MetricsError::EmptyTable);
        }
        Ok(entropy_bits(self.message_counts().into_values(), self.pairs.len()))
    }

    /// `H(N, M)` in bits.
    pub fn joint_entropy(&self) -> Result<f64, MetricsError> {
        if self.pairs.is_empty() {
            return Err(MetricsError::EmptyTable);
        }
        Ok(entropy_bits(self.joint_counts().into_values(), self.pairs.len()))
    }

    /// Residual uncertainty about numerosity given the message:
    /// `H(N|M) = H(N,M) − H(M)` in bits, with `0·log 0 := 0`.
    pub fn conditional_entropy(&self) -> Result<f64, MetricsError> {
        Ok(self.joint_entropy()? - self.message_entropy()?)
    }

    /// Counts matrix with rows = numerosities (ascending) and columns =
    /// message keys ordered by first occurrence in the table.
    pub fn mapping_matrix(&self) -> Result<MappingMatrix, MetricsError> {
        if self.pairs.is_empty() {
            return Err(MetricsError::EmptyTable);
        }
        let mut classes: Vec<u32> = self.class_counts().into_keys().collect();
        classes.sort_unstable();
        let mut messages: Vec<String> = Vec::new();
        for (_, k) in &self.pairs {
            if !messages.iter().any(|m| m == k) {
                messages.push(k.clone());
            }
        }
        let joint = self.joint_counts();
        let counts = classes
            .iter()
            .map(|&n| {
                messages
                    .iter()
                    .map(|k| joint.get(&(n, k.as_str())).copied().unwrap_or(0))
                    .collect()
            })
            .collect();
        Ok(MappingMatrix { classes, messages, counts })
    }
}

/// A numerosity-by-message counts matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MappingMatrix {
    pub classes: Vec<u32>,
    pub messages: Vec<String>,
    pub counts: Vec<Vec<usize>>,
}

impl MappingMatrix {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    /// CSV rows: header `class,<key>,<key>,...` then one row per class.
    /// Empty message keys render as `<empty>` so the header stays parseable.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("class");
        for m in &self.messages {
            out.push(',');
            out.push_str(&csv_safe_key(m));
        }
        out.push('\n');
        for (i, &n) in self.classes.iter().enumerate() {
            out.push_str(&n.to_string());
            for c in &self.counts[i] {
                out.push(',');
                out.push_str(&c.to_string());
            }
            out.push('\n');
        }
        out
    }
}

/// Message keys contain commas; quote them for CSV and name the empty key.
fn csv_safe_key(key: &str) -> String {
    if key.is_empty() {
        "<empty>".to_string()
    } else {
        format!("\"{key}\"")
    }
}

// ---- accuracy ----------------------------------------------------------------

/// Fraction of correct episodes, optionally restricted to a class subset.
pub fn accuracy(
    records: &[(u32, bool)],
    filter: Option<&[u32]>,
) -> Result<f64, MetricsError> {
    let mut total = 0usize;
    let mut correct = 0usize;
    for &(n, ok) in records {
        if let Some(classes) = filter {
            if !classes.contains(&n) {
                continue;
            }
        }
        total += 1;
        if ok {
            correct += 1;
        }
    }
    if total == 0 {
        return Err(MetricsError::EmptySelection);
    }
    Ok(correct as f64 / total as f64)
}

// ---- sketch discretisation ----------------------------------------------------

/// k-means result: centroids, per-point assignment, and the within-cluster
/// sum of squares the run converged to.
#[derive(Clone, Debug)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub wcss: f64,
}

impl ClusterModel {
    /// Nearest centroid of an arbitrary point (ties to the lowest index).
    pub fn assign(&self, point: &[f64]) -> usize {
        nearest_centroid(&self.centroids, point).0
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_centroid(centroids: &[Vec<f64>], p: &[f64]) -> (usize, f64) {
    let mut best = 0usize;
    let mut bd = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = dist2(c, p);
        if d < bd {
            bd = d;
            best = i;
        }
    }
    (best, bd)
}

/// Lloyd's algorithm with distance-weighted (k-means++) seeding, best of
/// `restarts` runs by WCSS. Fully deterministic given the rng: ties in
/// assignment go to the lowest centroid index, and an emptied cluster is
/// reseeded with the point farthest from its current centroid.
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    restarts: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ClusterModel, MetricsError> {
    assert!(k >= 1, "k must be at least 1");
    assert!(restarts >= 1, "need at least one restart");
    if points.len() < k {
        return Err(MetricsError::TooFewPoints { k, n: points.len() });
    }
    let mut best: Option<ClusterModel> = None;
    for _ in 0..restarts {
        let model = kmeans_once(points, k, rng);
        let replace = match &best {
            None => true,
            Some(b) => model.wcss < b.wcss,
        };
        if replace {
            best = Some(model);
        }
    }
    Ok(best.unwrap())
}

fn kmeans_once(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> ClusterModel {
    let n = points.len();
    // k-means++ seeding.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..n)].clone());
    let mut min_d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = min_d2.iter().sum();
        let idx = if total <= 0.0 {
            // All points coincide with a centroid; any choice is equivalent.
            rng.random_range(0..n)
        } else {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &d) in min_d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        };
        centroids.push(points[idx].clone());
        for (i, p) in points.iter().enumerate() {
            let d = dist2(p, centroids.last().unwrap());
            if d < min_d2[i] {
                min_d2[i] = d;
            }
        }
    }

    let mut assignments: Vec<usize> = points.iter().map(|p| nearest_centroid(&centroids, p).0).collect();
    for _iter in 0..100 {
        // Recompute centroids.
        let dim = points[0].len();
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Reseed an empty cluster with the point farthest from its
                // current centroid.
                let far = points
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (i, nearest_centroid(&centroids, p).1))
                    .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i)
                    .unwrap();
                centroids[c] = points[far].clone();
            } else {
                for (cv, s) in centroids[c].iter_mut().zip(&sums[c]) {
                    *cv = s / counts[c] as f64;
                }
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest_centroid(&centroids, p).0).collect();
        let stable = next == assignments;
        assignments = next;
        if stable {
            break;
        }
    }
    let wcss = points
        .iter()
        .zip(&assignments)
        .map(|(p, &a)| dist2(p, &centroids[a]))
        .sum();
    ClusterModel { k, centroids, assignments, wcss }
}

/// Block-mean downsample a square canvas to `target x target` and flatten.
pub fn sketch_point(canvas: &Raster, target: usize) -> Vec<f64> {
    canvas
        .downsample_mean(target)
        .data()
        .iter()
        .map(|&v| v as f64)
        .collect()
}

/// Discretise sketches: 16x16 block-mean pixels, k-means, 10 restarts.
pub fn cluster_sketches(
    canvases: &[&Raster],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ClusterModel, MetricsError> {
    let points: Vec<Vec<f64>> = canvases.iter().map(|c| sketch_point(c, 16)).collect();
    kmeans(&points, k, 10, rng)
}

/// Fraction of points whose cluster's majority label matches their own.
pub fn purity(assignments: &[usize], labels: &[u32], k: usize) -> f64 {
    assert_eq!(assignments.len(), labels.len());
    if assignments.is_empty() {
        return 0.0;
    }
    let mut per_cluster: Vec<BTreeMap<u32, usize>> = vec![BTreeMap::new(); k];
    for (&a, &l) in assignments.iter().zip(labels) {
        *per_cluster[a].entry(l).or_insert(0) += 1;
    }
    let majority: usize = per_cluster
        .iter()
        .map(|m| m.values().copied().max().unwrap_or(0))
        .sum();
    majority as f64 / assignments.len() as f64
}

// ---- dissimilarity -----------------------------------------------------------

/// Class-by-class mean Euclidean distances in downsampled pixel space.
#[derive(Clone, Debug)]
pub struct DissimilarityMatrix {
    pub classes: Vec<u32>,
    pub values: Vec<Vec<f64>>,
}

impl DissimilarityMatrix {
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("class");
        for c in &self.classes {
            out.push(',');
            out.push_str(&c.to_string());
        }
        out.push('\n');
        for (i, &c) in self.classes.iter().enumerate() {
            out.push_str(&c.to_string());
            for v in &self.values[i] {
                out.push(',');
                out.push_str(&format!("{v:.6}"));
            }
            out.push('\n');
        }
        out
    }

    /// Mean of the diagonal (intra-class) entries.
    pub fn mean_diagonal(&self) -> f64 {
        let n = self.classes.len();
        (0..n).map(|i| self.values[i][i]).sum::<f64>() / n as f64
    }

    /// Mean of the off-diagonal (inter-class) entries.
    pub fn mean_off_diagonal(&self) -> f64 {
        let n = self.classes.len();
        if n < 2 {
            return 0.0;
        }
        let mut s = 0.0;
        let mut cnt = 0usize;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += self.values[i][j];
                    cnt += 1;
                }
            }
        }
        s / cnt as f64
    }
}

/// Mean pairwise Euclidean distance between the groups' points; the
/// diagonal holds the mean distance over distinct intra-class pairs (zero
/// for singleton classes).
pub fn pairwise_dissimilarity(
    groups: &BTreeMap<u32, Vec<Vec<f64>>>,
) -> Result<DissimilarityMatrix, MetricsError> {
    for (&class, pts) in groups {
        if pts.is_empty() {
            return Err(MetricsError::MissingClass { class });
        }
    }
    if groups.is_empty() {
        return Err(MetricsError::EmptySelection);
    }
    let classes: Vec<u32> = groups.keys().copied().collect();
    let n = classes.len();
    let mut values = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in i..n {
            let a = &groups[&classes[i]];
            let b = &groups[&classes[j]];
            let mut s = 0.0;
            let mut cnt = 0usize;
            if i == j {
                for x in 0..a.len() {
                    for y in (x + 1)..a.len() {
                        s += dist2(&a[x], &a[y]).sqrt();
                        cnt += 1;
                    }
                }
            } else {
                for x in a {
                    for y in b {
                        s += dist2(x, y).sqrt();
                        cnt += 1;
                    }
                }
            }
            let mean = if cnt == 0 { 0.0 } else { s / cnt as f64 };
            values[i][j] = mean;
            values[j][i] = mean;
        }
    }
    Ok(DissimilarityMatrix { classes, values })
}

// ---- span correlation ---------------------------------------------------------

/// Pearson correlation, with degenerate (zero-variance) inputs reported as
/// zero correlation plus a flag rather than NaN.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpanCorrelation {
    pub r: f64,
    pub degenerate: bool,
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> SpanCorrelation {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    if xs.is_empty() {
        return SpanCorrelation { r: 0.0, degenerate: true };
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return SpanCorrelation { r: 0.0, degenerate: true };
    }
    SpanCorrelation { r: sxy / (sxx * syy).sqrt(), degenerate: false }
}

/// Diagonal of the bounding box around every stroke endpoint, in
/// normalised units.
pub fn stroke_bbox_diag(strokes: &StrokeSet) -> f64 {
    let mut min_x = f64::INFINITY;
    let mut max_x = f64::NEG_INFINITY;
    let mut min_y = f64::INFINITY;
    let mut max_y = f64::NEG_INFINITY;
    for c in &strokes.coords {
        for &(x, y) in &[(c[0], c[1]), (c[2], c[3])] {
            min_x = min_x.min(x);
            max_x = max_x.max(x);
            min_y = min_y.min(y);
            max_y = max_y.max(y);
        }
    }
    if !min_x.is_finite() {
        return 0.0;
    }
    ((max_x - min_x).powi(2) + (max_y - min_y).powi(2)).sqrt()
}

// ---- generalisation -----------------------------------------------------------

/// One evaluated test set: the trained classes plus one novel numerosity.
#[derive(Clone, Debug)]
pub struct GeneralisationEntry {
    pub novel_class: u32,
    pub in_dist_accuracy: f64,
    pub novel_accuracy: f64,
    /// Novel-class message keys with counts, most frequent first.
    pub novel_messages: Vec<(String, usize)>,
    /// Modal message key of the highest trained class within this test set.
    pub ceiling_key: Option<String>,
    /// Fraction of novel-class episodes whose key equals `ceiling_key`.
    pub ceiling_reuse_fraction: f64,
    /// True when that fraction exceeds one half.
    pub ceiling_reuse: bool,
}

#[derive(Clone, Debug)]
pub struct GeneralisationReport {
    pub train_classes: Vec<u32>,
    pub entries: Vec<GeneralisationEntry>,
}

/// Episode record consumed by the generalisation report: sender class,
/// message (or cluster) key, correctness.
pub type KeyedRecord = (u32, String, bool);

/// Summarise per-test-set transcripts: in-distribution vs novel accuracy
/// and whether the novel class reuses the highest trained class's code.
pub fn generalisation_report(
    train_classes: &[u32],
    per_set: &[(u32, Vec<KeyedRecord>)],
) -> Result<GeneralisationReport, MetricsError> {
    let ceiling_class = *train_classes.iter().max().ok_or(MetricsError::EmptySelection)?;
    let mut entries = Vec::with_capacity(per_set.len());
    for (novel, records) in per_set {
        let acc_records: Vec<(u32, bool)> = records.iter().map(|(n, _, c)| (*n, *c)).collect();
        let in_dist_accuracy = accuracy(&acc_records, Some(train_classes))?;
        let novel_accuracy = accuracy(&acc_records, Some(&[*novel]))?;

        let mut ceiling_counts: BTreeMap<&str, usize> = BTreeMap::new();
        let mut novel_counts: BTreeMap<&str, usize> = BTreeMap::new();
        for (n, key, _) in records {
            if *n == ceiling_class {
                *ceiling_counts.entry(key.as_str()).or_insert(0) += 1;
            } else if n == novel {
                *novel_counts.entry(key.as_str()).or_insert(0) += 1;
            }
        }
        // Modal key; count ties resolve to the lexically smallest key so the
        // report is deterministic.
        let ceiling_key = ceiling_counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(k, _)| k.to_string());
        let novel_total: usize = novel_counts.values().sum();
        let reused = ceiling_key
            .as_deref()
            .and_then(|ck| novel_counts.get(ck).copied())
            .unwrap_or(0);
        let ceiling_reuse_fraction = if novel_total == 0 {
            0.0
        } else {
            reused as f64 / novel_total as f64
        };
        let mut novel_messages: Vec<(String, usize)> =
            novel_counts.into_iter().map(|(k, c)| (k.to_string(), c)).collect();
        novel_messages.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        entries.push(GeneralisationEntry {
            novel_class: *novel,
            in_dist_accuracy,
            novel_accuracy,
            novel_messages,
            ceiling_key,
            ceiling_reuse_fraction,
            ceiling_reuse: ceiling_reuse_fraction > 0.5,
        });
    }
    Ok(GeneralisationReport { train_classes: train_classes.to_vec(), entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    /// Direct plug-in formula `H(N|M) = Σ_m p(m) H(N|m)`, written
    /// independently of the production `H(N,M) − H(M)` route.
    fn cond_entropy_direct(pairs: &[(u32, String)]) -> f64 {
        let total = pairs.len() as f64;
        let mut by_msg: BTreeMap<&str, BTreeMap<u32, usize>> = BTreeMap::new();
        for (n, k) in pairs {
            *by_msg.entry(k.as_str()).or_default().entry(*n).or_insert(0) += 1;
        }
        let mut h = 0.0;
        for counts in by_msg.values() {
            let m_total: usize = counts.values().sum();
            let pm = m_total as f64 / total;
            let mut hm = 0.0;
            for &c in counts.values() {
                let p = c as f64 / m_total as f64;
                hm -= p * p.log2();
            }
            h += pm * hm;
        }
        h
    }

    #[test]
    fn perfect_bijection_has_zero_conditional_entropy() {
        let t = CodeTable::from_pairs((1..=5).flat_map(|n| {
            std::iter::repeat_n((n, format!("m{n}")), 7)
        }));
        assert!(t.conditional_entropy().unwrap().abs() < 1e-12);
    }

    #[test]
    fn single_message_gives_class_entropy() {
        let t = CodeTable::from_pairs((1..=5).map(|n| (n, "m".to_string())));
        let h = t.conditional_entropy().unwrap();
        assert!((h - 5.0f64.log2()).abs() < 1e-12, "got {h}");
        assert!((h - t.class_entropy().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn worked_four_pair_example() {
        // {(1,a),(1,a),(2,a),(2,b)}: message a carries 3 of 4 episodes with
        // class split 2:1, message b is unambiguous, so
        // H(N|M) = 0.75 * H(2/3, 1/3).
        let t = CodeTable::from_pairs(vec![
            (1, "a".to_string()),
            (1, "a".to_string()),
            (2, "a".to_string()),
            (2, "b".to_string()),
        ]);
        let h = t.conditional_entropy().unwrap();
        let expect = 0.75 * -((2.0 / 3.0f64) * (2.0 / 3.0f64).log2() + (1.0 / 3.0) * (1.0 / 3.0f64).log2());
        assert!((h - expect).abs() < 1e-12);
        assert!((h - 0.6887218755408672).abs() < 1e-12, "got {h:.16}");
    }

    #[test]
    fn both_entropy_routes_agree_on_random_tables() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let cells = rng.random_range(1..=20usize);
            let pairs: Vec<(u32, String)> = (0..cells)
                .flat_map(|_| {
                    let n = rng.random_range(1..=5u32);
                    let k = format!("k{}", rng.random_range(0..6u32));
                    let reps = rng.random_range(1..=4usize);
                    std::iter::repeat_n((n, k), reps)
                })
                .collect();
            let t = CodeTable::from_pairs(pairs.clone());
            let fast = t.conditional_entropy().unwrap();
            let slow = cond_entropy_direct(&pairs);
            assert!((fast - slow).abs() < 1e-12, "fast {fast} vs direct {slow}");
        }
    }

    #[test]
    fn empty_table_is_an_error() {
        let t = CodeTable::new();
        assert!(matches!(t.conditional_entropy(), Err(MetricsError::EmptyTable)));
    }

    #[test]
    fn mapping_matrix_orders_and_conserves() {
        let t = CodeTable::from_pairs(vec![
            (3, "x".to_string()),
            (1, "y".to_string()),
            (3, "x".to_string()),
            (2, "z".to_string()),
            (1, "x".to_string()),
        ]);
        let m = t.mapping_matrix().unwrap();
        assert_eq!(m.classes, vec![1, 2, 3]);
        // First-occurrence column order, not lexical.
        assert_eq!(m.messages, vec!["x", "y", "z"]);
        assert_eq!(m.counts, vec![vec![1, 1, 0], vec![0, 0, 1], vec![2, 0, 0]]);
        assert_eq!(m.total(), t.len());
        let row_sums: Vec<usize> = m.counts.iter().map(|r| r.iter().sum()).collect();
        assert_eq!(row_sums, vec![2, 1, 2]);
    }

    #[test]
    fn accuracy_filters_and_errors() {
        let recs = vec![(1, true), (2, false), (2, true), (3, true)];
        assert!((accuracy(&recs, None).unwrap() - 0.75).abs() < 1e-12);
        assert!((accuracy(&recs, Some(&[2])).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(accuracy(&recs, Some(&[9])), Err(MetricsError::EmptySelection)));
    }

    #[test]
    fn kmeans_separates_three_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for (li, centre) in [(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)].iter().enumerate() {
            for _ in 0..20 {
                points.push(vec![
                    centre.0 + rng.random_range(-0.5..0.5),
                    centre.1 + rng.random_range(-0.5..0.5),
                ]);
                labels.push(li as u32);
            }
        }
        let model = kmeans(&points, 3, 10, &mut rng).unwrap();
        assert!((purity(&model.assignments, &labels, 3) - 1.0).abs() < 1e-12);
        // Duplicated points land in the same cluster.
        let a = model.assign(&points[0]);
        let b = model.assign(&points[0].clone());
        assert_eq!(a, b);
    }

    #[test]
    fn kmeans_k1_and_too_few_points() {
        let points = vec![vec![0.0, 0.0], vec![2.0, 0.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = kmeans(&points, 1, 3, &mut rng).unwrap();
        assert_eq!(m.assignments, vec![0, 0]);
        assert!((m.centroids[0][0] - 1.0).abs() < 1e-12);
        assert!(matches!(
            kmeans(&points, 3, 3, &mut rng),
            Err(MetricsError::TooFewPoints { k: 3, n: 2 })
        ));
    }

    #[test]
    fn kmeans_is_deterministic_given_seed() {
        let mut pts = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..30 {
            pts.push(vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]);
        }
        let m1 = kmeans(&pts, 4, 10, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let m2 = kmeans(&pts, 4, 10, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(m1.assignments, m2.assignments);
        assert_eq!(m1.centroids, m2.centroids);
    }

    #[test]
    fn dissimilarity_symmetry_and_zero_case() {
        let mut groups: BTreeMap<u32, Vec<Vec<f64>>> = BTreeMap::new();
        groups.insert(1, vec![vec![0.0, 0.0], vec![0.0, 0.0]]);
        groups.insert(2, vec![vec![0.0, 0.0]]);
        let d = pairwise_dissimilarity(&groups).unwrap();
        assert_eq!(d.classes, vec![1, 2]);
        for row in &d.values {
            for &v in row {
                assert!(v.abs() < 1e-12);
            }
        }
        groups.insert(3, vec![vec![3.0, 4.0]]);
        let d = pairwise_dissimilarity(&groups).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((d.values[i][j] - d.values[j][i]).abs() < 1e-12);
                assert!(d.values[i][j] >= 0.0);
            }
        }
        // Distance from the origin points to (3,4) is 5.
        assert!((d.values[0][2] - 5.0).abs() < 1e-12);
        groups.insert(4, vec![]);
        assert!(matches!(
            pairwise_dissimilarity(&groups),
            Err(MetricsError::MissingClass { class: 4 })
        ));
    }

    #[test]
    fn pearson_handles_affine_and_degenerate_inputs() {
        let xs = vec![1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x + 1.0).collect();
        let c = pearson(&xs, &ys);
        assert!(!c.degenerate);
        assert!((c.r - 1.0).abs() < 1e-12);
        let flat = vec![2.0; 4];
        let c = pearson(&xs, &flat);
        assert!(c.degenerate);
        assert_eq!(c.r, 0.0);
    }

    #[test]
    fn stroke_bbox_diagonal() {
        let s = StrokeSet { coords: vec![[0.1, 0.1, 0.4, 0.1], [0.1, 0.5, 0.2, 0.2]] };
        // Endpoint bbox: x in [0.1, 0.4], y in [0.1, 0.5].
        let d = stroke_bbox_diag(&s);
        assert!((d - (0.3f64.powi(2) + 0.4f64.powi(2)).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn generalisation_flags_ceiling_reuse() {
        let train = vec![1, 2, 3, 4, 5];
        let mut records: Vec<KeyedRecord> = Vec::new();
        for n in 1..=5u32 {
            for _ in 0..10 {
                records.push((n, format!("m{n}"), true));
            }
        }
        // Novel class 7: 8 of 10 episodes reuse class 5's key, none correct.
        for i in 0..10 {
            let key = if i < 8 { "m5".to_string() } else { "m1".to_string() };
            records.push((7, key, false));
        }
        let report = generalisation_report(&train, &[(7, records)]).unwrap();
        let e = &report.entries[0];
        assert_eq!(e.novel_class, 7);
        assert!((e.in_dist_accuracy - 1.0).abs() < 1e-12);
        assert!(e.novel_accuracy.abs() < 1e-12);
        assert_eq!(e.ceiling_key.as_deref(), Some("m5"));
        assert!((e.ceiling_reuse_fraction - 0.8).abs() < 1e-12);
        assert!(e.ceiling_reuse);
        assert_eq!(e.novel_messages[0], ("m5".to_string(), 8));
    }

    proptest! {
        #[test]
        fn conditional_entropy_is_bounded(
            pairs in proptest::collection::vec((1u32..=6, 0u32..5), 1..60)
        ) {
            let t = CodeTable::from_pairs(
                pairs.iter().map(|&(n, m)| (n, format!("m{m}")))
            );
            let h = t.conditional_entropy().unwrap();
            let hn = t.class_entropy().unwrap();
            prop_assert!(h >= -1e-12, "H(N|M) = {h} negative");
            prop_assert!(h <= hn + 1e-12, "H(N|M) = {h} exceeds H(N) = {hn}");
        }

        #[test]
        fn merging_message_columns_never_decreases_entropy(
            pairs in proptest::collection::vec((1u32..=5, 0u32..4), 2..50)
        ) {
            let t = CodeTable::from_pairs(
                pairs.iter().map(|&(n, m)| (n, format!("m{m}")))
            );
            let before = t.conditional_entropy().unwrap();
            // Merge message 0 into message 1 (coarser observation).
            let merged = CodeTable::from_pairs(pairs.iter().map(|&(n, m)| {
                let m = if m == 0 { 1 } else { m };
                (n, format!("m{m}"))
            }));
            let after = merged.conditional_entropy().unwrap();
            prop_assert!(after + 1e-9 >= before, "merge decreased H: {before} -> {after}");
        }
    }
}
