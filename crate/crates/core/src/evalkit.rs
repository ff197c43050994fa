//! Hamming-space retrieval evaluation.
//!
//! Codes are packed into 64-bit words so distances are XOR + popcount.
//! Rankings order the database by ascending distance with ties broken by
//! ascending database index.
//!
//! AP at cutoff `k` is normalised by the number of relevant items inside
//! the top `k`, not by the total relevant count.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::attack::AttackMode;
use crate::error::{check_len, Error, Result};
use crate::hashmodel::{HashCode, LabelVector};

/// Default retrieval cutoff for a database of `n` items.
pub fn default_top_k(n: usize) -> usize {
    n.min(5000)
}

/// Number of differing bits between two codes.
pub fn hamming_distance(a: &HashCode, b: &HashCode) -> Result<u32> {
    check_len("hamming distance", a.len(), b.len())?;
    Ok(a.to_words()
        .iter()
        .zip(b.to_words())
        .map(|(x, y)| (x ^ y).count_ones())
        .sum())
}

#[inline]
fn packed_distance(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Packed database codes with aligned labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    k: usize,
    words: usize,
    packed: Vec<u64>,
    labels: Vec<LabelVector>,
}

impl RetrievalIndex {
    pub fn new(codes: &[HashCode], labels: Vec<LabelVector>) -> Result<Self> {
        check_len("retrieval index labels", codes.len(), labels.len())?;
        let k = codes.first().map_or(0, |c| c.len());
        let words = k.div_ceil(64);
        let mut packed = Vec::with_capacity(codes.len() * words);
        for c in codes {
            check_len("retrieval index code", k, c.len())?;
            packed.extend(c.to_words());
        }
        Ok(Self {
            k,
            words,
            packed,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn labels(&self) -> &[LabelVector] {
        &self.labels
    }

    pub fn code(&self, i: usize) -> HashCode {
        HashCode::from_words(&self.packed[i * self.words..(i + 1) * self.words], self.k)
    }

    /// Distances from `query` to every database item, in index order.
    pub fn distances(&self, query: &HashCode) -> Result<Vec<u32>> {
        check_len("query code", self.k, query.len())?;
        let q = query.to_words();
        Ok(self
            .packed
            .chunks_exact(self.words.max(1))
            .take(self.len())
            .map(|c| packed_distance(&q, c))
            .collect())
    }
}

/// Indices of the `k` nearest database items.
pub fn rank_database(query: &HashCode, index: &RetrievalIndex, k: usize) -> Result<Vec<usize>> {
    if index.is_empty() {
        return Err(Error::EmptyBatch("retrieval index is empty"));
    }
    if k > index.len() {
        return Err(Error::InvalidConfig(format!(
            "top-k {k} exceeds database size {}",
            index.len()
        )));
    }
    let dist = index.distances(query)?;
    // counting sort by distance keeps index order within a bucket
    let mut buckets = vec![Vec::new(); index.k + 1];
    for (i, &d) in dist.iter().enumerate() {
        buckets[d as usize].push(i);
    }
    Ok(buckets.into_iter().flatten().take(k).collect())
}

/// AP of a ranked relevance list; 0 when nothing is relevant.
pub fn average_precision(relevance: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

fn check_queries(codes: &[HashCode], labels: &[LabelVector], index: &RetrievalIndex) -> Result<()> {
    if codes.is_empty() {
        return Err(Error::EmptyBatch("no queries"));
    }
    check_len("query labels", codes.len(), labels.len())?;
    if index.is_empty() {
        return Err(Error::EmptyBatch("retrieval index is empty"));
    }
    Ok(())
}

/// Per-query AP at cutoff `k`, in query order.
pub fn ap_at_k(
    query_codes: &[HashCode],
    relevance_labels: &[LabelVector],
    index: &RetrievalIndex,
    k: usize,
) -> Result<Vec<f64>> {
    check_queries(query_codes, relevance_labels, index)?;
    if k == 0 {
        return Err(Error::InvalidConfig("top-k must be >= 1".into()));
    }
    query_codes
        .par_iter()
        .zip(relevance_labels)
        .map(|(q, y)| {
            let ranked = rank_database(q, index, k)?;
            let rel: Vec<bool> = ranked.iter().map(|&i| y.overlaps(&index.labels[i])).collect();
            Ok(average_precision(&rel))
        })
        .collect()
}

/// Mean AP over queries. Relevance is judged against `relevance_labels`:
/// the true query labels for MAP, the attack's target labels for t-MAP.
pub fn map_at_k(
    query_codes: &[HashCode],
    relevance_labels: &[LabelVector],
    index: &RetrievalIndex,
    k: usize,
) -> Result<f64> {
    let aps = ap_at_k(query_codes, relevance_labels, index, k)?;
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub radius: u32,
    pub recall: f64,
    pub precision: f64,
}

/// Precision/recall of the Hamming ball of each radius `0..=K`, averaged over
/// queries. Queries with no relevant item are skipped; a query contributes
/// to the precision at a radius only once its ball is nonempty, and radii
/// where no query retrieves anything are omitted.
pub fn pr_curve(
    query_codes: &[HashCode],
    relevance_labels: &[LabelVector],
    index: &RetrievalIndex,
) -> Result<Vec<PrPoint>> {
    check_queries(query_codes, relevance_labels, index)?;
    let kk = index.k;
    // per query: cumulative (retrieved, relevant-retrieved) per radius, total relevant
    type Counts = (Vec<usize>, Vec<usize>, usize);
    let per_query: Vec<Option<Counts>> = query_codes
        .par_iter()
        .zip(relevance_labels)
        .map(|(q, y)| {
            let dist = index.distances(q)?;
            let mut retrieved = vec![0usize; kk + 1];
            let mut relevant = vec![0usize; kk + 1];
            let mut total = 0;
            for (i, &d) in dist.iter().enumerate() {
                retrieved[d as usize] += 1;
                if y.overlaps(&index.labels[i]) {
                    relevant[d as usize] += 1;
                    total += 1;
                }
            }
            if total == 0 {
                return Ok(None);
            }
            for r in 1..=kk {
                retrieved[r] += retrieved[r - 1];
                relevant[r] += relevant[r - 1];
            }
            Ok(Some((retrieved, relevant, total)))
        })
        .collect::<Result<_>>()?;
    let valid: Vec<_> = per_query.iter().flatten().collect();
    let mut points = Vec::new();
    if valid.is_empty() {
        return Ok(points);
    }
    for r in 0..=kk {
        let mut recall = 0.0;
        let mut precision = 0.0;
        let mut nonempty = 0usize;
        for (ret, rel, total) in &valid {
            recall += rel[r] as f64 / *total as f64;
            if ret[r] > 0 {
                precision += rel[r] as f64 / ret[r] as f64;
                nonempty += 1;
            }
        }
        if nonempty == 0 {
            continue;
        }
        points.push(PrPoint {
            radius: r as u32,
            recall: recall / valid.len() as f64,
            precision: precision / nonempty as f64,
        });
    }
    Ok(points)
}

/// Mean precision of the top `n` ranked items for each `n` in `n_grid`
/// (values above the database size are clipped to it).
pub fn precision_at_topn(
    query_codes: &[HashCode],
    relevance_labels: &[LabelVector],
    index: &RetrievalIndex,
    n_grid: &[usize],
) -> Result<Vec<(usize, f64)>> {
    check_queries(query_codes, relevance_labels, index)?;
    let grid: Vec<usize> = n_grid.iter().map(|&n| n.clamp(1, index.len())).collect();
    let max_n = grid.iter().copied().max().unwrap_or(1);
    let per_query: Vec<Vec<f64>> = query_codes
        .par_iter()
        .zip(relevance_labels)
        .map(|(q, y)| {
            let ranked = rank_database(q, index, max_n)?;
            let mut cum = Vec::with_capacity(ranked.len());
            let mut hits = 0usize;
            for &i in &ranked {
                hits += y.overlaps(&index.labels[i]) as usize;
                cum.push(hits);
            }
            Ok(grid.iter().map(|&n| cum[n - 1] as f64 / n as f64).collect())
        })
        .collect::<Result<_>>()?;
    Ok(grid
        .iter()
        .enumerate()
        .map(|(g, &n)| {
            let s: f64 = per_query.iter().map(|p| p[g]).sum();
            (n, s / per_query.len() as f64)
        })
        .collect())
}

/// Batch-averaged perturbation size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perceptibility {
    pub linf: f64,
    pub l2: f64,
    pub mse: f64,
}

pub fn perceptibility(clean: &[Vec<f64>], adv: &[Vec<f64>]) -> Result<Perceptibility> {
    check_len("perceptibility batch", clean.len(), adv.len())?;
    if clean.is_empty() {
        return Err(Error::EmptyBatch("perceptibility needs at least one sample"));
    }
    let mut acc = Perceptibility {
        linf: 0.0,
        l2: 0.0,
        mse: 0.0,
    };
    for (c, a) in clean.iter().zip(adv) {
        check_len("perceptibility sample", c.len(), a.len())?;
        let mut linf: f64 = 0.0;
        let mut sq = 0.0;
        for (x, y) in c.iter().zip(a) {
            let d = y - x;
            linf = linf.max(d.abs());
            sq += d * d;
        }
        acc.linf += linf;
        acc.l2 += sq.sqrt();
        acc.mse += sq / c.len().max(1) as f64;
    }
    let n = clean.len() as f64;
    Ok(Perceptibility {
        linf: acc.linf / n,
        l2: acc.l2 / n,
        mse: acc.mse / n,
    })
}

/// MAP obtained by querying with each attack's representative code instead
/// of the adversarial query's code.
///
/// Non-targeted attacks drive the code away from the mainstay code `b_m`,
/// so the code they aim for is `-b_m`; pass `b_m` and true labels. Targeted
/// attacks aim for `b_t`; pass `b_t` and target labels (the result is t-MAP).
pub fn theoretical_map(
    representatives: &[HashCode],
    relevance_labels: &[LabelVector],
    index: &RetrievalIndex,
    k: usize,
    mode: AttackMode,
) -> Result<f64> {
    let codes: Vec<HashCode> = match mode {
        AttackMode::NonTargeted => representatives.iter().map(|c| c.negated()).collect(),
        AttackMode::Targeted => representatives.to_vec(),
    };
    map_at_k(&codes, relevance_labels, index, k)
}

/// All metrics for one evaluated condition.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub map: f64,
    pub t_map: Option<f64>,
    pub pr_points: Vec<PrPoint>,
    pub p_at_n: Vec<(usize, f64)>,
    pub perceptibility: Option<Perceptibility>,
    pub top_k: usize,
    pub query_count: usize,
}

/// Standard `n` values for precision@topN.
pub const DEFAULT_N_GRID: [usize; 10] = [1, 5, 10, 20, 50, 100, 200, 500, 1000, 5000];

impl EvalReport {
    /// Evaluates `query_codes` with MAP, PR and P@N against true labels.
    pub fn evaluate(
        query_codes: &[HashCode],
        query_labels: &[LabelVector],
        index: &RetrievalIndex,
        top_k: usize,
        n_grid: &[usize],
    ) -> Result<Self> {
        Ok(Self {
            map: map_at_k(query_codes, query_labels, index, top_k)?,
            t_map: None,
            pr_points: pr_curve(query_codes, query_labels, index)?,
            p_at_n: precision_at_topn(query_codes, query_labels, index, n_grid)?,
            perceptibility: None,
            top_k,
            query_count: query_codes.len(),
        })
    }

    /// One `key = value` record per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "map = {}", self.map).unwrap();
        if let Some(t) = self.t_map {
            writeln!(s, "t_map = {t}").unwrap();
        }
        writeln!(s, "top_k = {}", self.top_k).unwrap();
        writeln!(s, "query_count = {}", self.query_count).unwrap();
        if let Some(p) = self.perceptibility {
            writeln!(s, "perceptibility.linf = {}", p.linf).unwrap();
            writeln!(s, "perceptibility.l2 = {}", p.l2).unwrap();
            writeln!(s, "perceptibility.mse = {}", p.mse).unwrap();
        }
        for p in &self.pr_points {
            writeln!(s, "pr.r{} = {} {}", p.radius, p.recall, p.precision).unwrap();
        }
        for (n, p) in &self.p_at_n {
            writeln!(s, "p_at.{n} = {p}").unwrap();
        }
        s
    }

    /// Inverse of [`EvalReport::to_text`].
    pub fn from_text(text: &str) -> Result<Self> {
        let mut report = EvalReport {
            map: f64::NAN,
            t_map: None,
            pr_points: Vec::new(),
            p_at_n: Vec::new(),
            perceptibility: None,
            top_k: 0,
            query_count: 0,
        };
        let mut perc = [None::<f64>; 3];
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let bad = |m: String| Error::Parse { line: line_no, message: m };
            if line.trim().is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once(" = ")
                .ok_or_else(|| bad(format!("expected `key = value`, got `{line}`")))?;
            let num = |s: &str| s.trim().parse::<f64>().map_err(|e| bad(format!("{key}: {e}")));
            let int = |s: &str| s.trim().parse::<usize>().map_err(|e| bad(format!("{key}: {e}")));
            match key {
                "map" => report.map = num(value)?,
                "t_map" => report.t_map = Some(num(value)?),
                "top_k" => report.top_k = int(value)?,
                "query_count" => report.query_count = int(value)?,
                "perceptibility.linf" => perc[0] = Some(num(value)?),
                "perceptibility.l2" => perc[1] = Some(num(value)?),
                "perceptibility.mse" => perc[2] = Some(num(value)?),
                _ => {
                    if let Some(r) = key.strip_prefix("pr.r") {
                        let (rec, prec) = value
                            .split_once(' ')
                            .ok_or_else(|| bad("pr entry needs recall and precision".into()))?;
                        report.pr_points.push(PrPoint {
                            radius: r.parse().map_err(|_| bad(format!("bad radius in `{key}`")))?,
                            recall: num(rec)?,
                            precision: num(prec)?,
                        });
                    } else if let Some(n) = key.strip_prefix("p_at.") {
                        report.p_at_n.push((int(n)?, num(value)?));
                    } else {
                        return Err(bad(format!("unknown key `{key}`")));
                    }
                }
            }
        }
        if let [Some(linf), Some(l2), Some(mse)] = perc {
            report.perceptibility = Some(Perceptibility { linf, l2, mse });
        }
        if report.map.is_nan() {
            return Err(Error::Parse {
                line: 0,
                message: "report has no `map` record".into(),
            });
        }
        Ok(report)
    }

    pub fn pr_csv(&self) -> String {
        let mut s = String::from("recall,precision\n");
        for p in &self.pr_points {
            writeln!(s, "{},{}", p.recall, p.precision).unwrap();
        }
        s
    }

    pub fn topn_csv(&self) -> String {
        let mut s = String::from("n,precision\n");
        for (n, p) in &self.p_at_n {
            writeln!(s, "{n},{p}").unwrap();
        }
        s
    }

    /// Writes `<name>.txt`, `<name>.pr.csv` and `<name>.topn.csv` into `dir`.
    pub fn write_to_dir(&self, dir: &Path, name: &str) -> Result<()> {
        std::fs::write(dir.join(format!("{name}.txt")), self.to_text())?;
        std::fs::write(dir.join(format!("{name}.pr.csv")), self.pr_csv())?;
        std::fs::write(dir.join(format!("{name}.topn.csv")), self.topn_csv())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn code(bits: &[i8]) -> HashCode {
        HashCode::new(bits.to_vec()).unwrap()
    }

    fn arb_code(k: usize) -> impl Strategy<Value = HashCode> {
        proptest::collection::vec(prop_oneof![Just(1i8), Just(-1i8)], k).prop_map(|b| HashCode::new(b).unwrap())
    }

    #[test]
    fn hamming_cases() {
        let a = code(&[1, -1, 1, 1]);
        assert_eq!(hamming_distance(&a, &a).unwrap(), 0);
        let b = HashCode::new(vec![1; 16]).unwrap();
        assert_eq!(hamming_distance(&b, &b.negated()).unwrap(), 16);
        let c = code(&[1, 1, -1, -1]);
        let d = code(&[1, -1, 1, -1]);
        assert_eq!(c.dot(&d), 0);
        assert_eq!(hamming_distance(&c, &d).unwrap(), 2);
        assert!(hamming_distance(&c, &code(&[1])).is_err());
    }

    #[test]
    fn average_precision_cases() {
        assert_eq!(average_precision(&[true, true, false]), 1.0);
        assert_eq!(average_precision(&[false, true]), 0.5);
        assert!((average_precision(&[true, false, true]) - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(&[false, false]), 0.0);
    }

    fn toy_index() -> RetrievalIndex {
        let codes = vec![code(&[1, 1, 1]), code(&[1, 1, -1]), code(&[-1, -1, -1]), code(&[1, -1, 1])];
        let labels = vec![
            LabelVector::from_classes(2, &[0]),
            LabelVector::from_classes(2, &[0]),
            LabelVector::from_classes(2, &[1]),
            LabelVector::from_classes(2, &[0, 1]),
        ];
        RetrievalIndex::new(&codes, labels).unwrap()
    }

    #[test]
    fn rank_cases() {
        let idx = toy_index();
        let all = rank_database(&code(&[1, 1, 1]), &idx, 4).unwrap();
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        assert_eq!(all[0], 0);
        // distances 0,1,3,1 → ties broken by index
        assert_eq!(all, vec![0, 1, 3, 2]);
        assert!(rank_database(&code(&[1, 1, 1]), &idx, 5).is_err());
        let empty = RetrievalIndex::new(&[], vec![]).unwrap();
        assert!(rank_database(&code(&[1]), &empty, 0).is_err());
    }

    #[test]
    fn map_cases() {
        let idx = toy_index();
        let q = code(&[1, 1, 1]);
        // class-0 query: top-2 are both relevant
        let m = map_at_k(std::slice::from_ref(&q), &[LabelVector::from_classes(2, &[0])], &idx, 2).unwrap();
        assert_eq!(m, 1.0);
        let none = map_at_k(std::slice::from_ref(&q), &[LabelVector::new(vec![0, 0]).unwrap()], &idx, 4).unwrap();
        assert_eq!(none, 0.0);
        assert!(map_at_k(&[], &[], &idx, 2).is_err());
    }

    #[test]
    fn map_three_query_fixture() {
        let idx = toy_index();
        let qs = vec![code(&[1, 1, 1]), code(&[-1, -1, 1]), code(&[-1, 1, -1])];
        let ls = vec![
            LabelVector::from_classes(2, &[1]),
            LabelVector::from_classes(2, &[0]),
            LabelVector::from_classes(2, &[0, 1]),
        ];
        // Hand rankings at k = 3:
        // q0 d=[0,1,3,1] → 0,1,3 rel(class1)=[F,F,T] → AP 1/3
        // q1 d=[2,3,1,1] → 2,3,0 rel(class0)=[F,T,T] → (1/2 + 2/3)/2
        // q2 d=[2,1,1,3] → 1,2,0 rel(any)=[T,T,T] → 1
        let expected = (1.0 / 3.0 + (0.5 + 2.0 / 3.0) / 2.0 + 1.0) / 3.0;
        let got = map_at_k(&qs, &ls, &idx, 3).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn pr_cases() {
        let idx = toy_index();
        let q = code(&[1, 1, 1]);
        let pts = pr_curve(std::slice::from_ref(&q), &[LabelVector::from_classes(2, &[0])], &idx).unwrap();
        assert!(pts.len() <= 4);
        assert_eq!(pts.last().unwrap().recall, 1.0);
        // radius 0: {0} → p=1, r=1/3; radius 1: {0,1,3} → p=1, r=1; radius 3: all → p=3/4
        assert_eq!(pts[0].radius, 0);
        assert!((pts[0].recall - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(pts[1].precision, 1.0);
        assert_eq!(pts.last().unwrap().precision, 0.75);
        let all_rel = pr_curve(&[q], &[LabelVector::new(vec![1, 1]).unwrap()], &idx).unwrap();
        assert!(all_rel.iter().all(|p| p.precision == 1.0));
    }

    #[test]
    fn pr_two_query_fixture() {
        let idx = toy_index();
        let qs = vec![code(&[1, 1, 1]), code(&[-1, -1, -1])];
        let ls = vec![LabelVector::from_classes(2, &[1]), LabelVector::from_classes(2, &[0])];
        // q0 d=[0,1,3,1], relevant {2,3}: r0 ret{0} rel0; r1 ret{0,1,3} rel1; r2 same; r3 all rel2
        // q1 d=[3,2,0,2], relevant {0,1,3}: r0 ret{2} rel0; r1 same; r2 ret{1,2,3} rel2; r3 all rel3
        let pts = pr_curve(&qs, &ls, &idx).unwrap();
        let expect = [
            (0.0, 0.0),
            ((0.5 + 0.0) / 2.0, (1.0 / 3.0 + 0.0) / 2.0),
            ((0.5 + 2.0 / 3.0) / 2.0, (1.0 / 3.0 + 2.0 / 3.0) / 2.0),
            (1.0, (0.5 + 0.75) / 2.0),
        ];
        assert_eq!(pts.len(), 4);
        for (p, (r, pr)) in pts.iter().zip(expect) {
            assert!((p.recall - r).abs() < 1e-12 && (p.precision - pr).abs() < 1e-12, "{p:?}");
        }
    }

    #[test]
    fn topn_cases() {
        let idx = toy_index();
        let q = code(&[1, 1, 1]);
        let p = precision_at_topn(&[q], &[LabelVector::from_classes(2, &[0])], &idx, &[1, 3, 4, 100]).unwrap();
        assert_eq!(p, vec![(1, 1.0), (3, 1.0), (4, 0.75), (4, 0.75)]);
    }

    #[test]
    fn perceptibility_cases() {
        let c = vec![vec![0.5; 4]];
        assert_eq!(perceptibility(&c, &c).unwrap(), Perceptibility { linf: 0.0, l2: 0.0, mse: 0.0 });
        let mut a = c.clone();
        a[0][2] += 8.0 / 255.0;
        assert!((perceptibility(&c, &a).unwrap().linf - 8.0 / 255.0).abs() < 1e-15);
        let shifted = vec![vec![0.5 + 0.01; 4]];
        let p = perceptibility(&c, &shifted).unwrap();
        assert!((p.l2 - 0.01 * 2.0).abs() < 1e-12);
        assert!((p.mse - 1e-4).abs() < 1e-12);
        assert!(perceptibility(&c, &[]).is_err());
    }

    #[test]
    fn theoretical_map_uses_representative() {
        let idx = toy_index();
        // targeted: representative equal to database item 0, class 0 target
        let t = theoretical_map(&[code(&[1, 1, 1])], &[LabelVector::from_classes(2, &[0])], &idx, 2, AttackMode::Targeted).unwrap();
        assert_eq!(t, 1.0);
        // non-targeted aims for the negation
        let n = theoretical_map(&[code(&[-1, -1, -1])], &[LabelVector::from_classes(2, &[0])], &idx, 2, AttackMode::NonTargeted).unwrap();
        assert_eq!(n, 1.0);
    }

    #[test]
    fn report_text_and_csv() {
        let idx = toy_index();
        let q = vec![code(&[1, 1, 1])];
        let l = vec![LabelVector::from_classes(2, &[0])];
        let r = EvalReport::evaluate(&q, &l, &idx, 4, &[1, 2]).unwrap();
        let text = r.to_text();
        assert!(text.starts_with("map = "));
        assert!(r.pr_csv().starts_with("recall,precision\n"));
        assert_eq!(r.topn_csv(), "n,precision\n1,1\n2,1\n");
        let mut full = r.clone();
        full.t_map = Some(0.25);
        full.perceptibility = Some(Perceptibility { linf: 0.1, l2: 0.2, mse: 1.0 / 3.0 });
        assert_eq!(EvalReport::from_text(&full.to_text()).unwrap(), full);
        assert!(EvalReport::from_text("top_k = 3\n").is_err());
        assert!(matches!(EvalReport::from_text("map = 1\nwhat\n"), Err(Error::Parse { line: 2, .. })));
    }

    proptest! {
        #[test]
        fn hamming_metric_axioms(a in arb_code(70), b in arb_code(70), c in arb_code(70)) {
            let d = |x: &HashCode, y: &HashCode| hamming_distance(x, y).unwrap();
            prop_assert_eq!(d(&a, &a), 0);
            prop_assert_eq!(d(&a, &b), d(&b, &a));
            prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
            prop_assert_eq!(2 * d(&a, &b) as i64, 70 - a.dot(&b));
            if d(&a, &b) == 0 { prop_assert_eq!(&a, &b); }
        }

        #[test]
        fn ap_is_one_iff_relevant_first(rel in proptest::collection::vec(any::<bool>(), 1..40)) {
            let ap = average_precision(&rel);
            prop_assert!((0.0..=1.0).contains(&ap));
            let hits = rel.iter().filter(|&&r| r).count();
            let front_loaded = hits > 0 && rel[..hits].iter().all(|&r| r);
            prop_assert_eq!(ap == 1.0, front_loaded);
        }

        #[test]
        fn ranking_is_deterministic(codes in proptest::collection::vec(arb_code(12), 1..40), q in arb_code(12)) {
            let labels = vec![LabelVector::from_classes(1, &[0]); codes.len()];
            let idx = RetrievalIndex::new(&codes, labels).unwrap();
            let a = rank_database(&q, &idx, codes.len()).unwrap();
            let b = rank_database(&q, &idx, codes.len()).unwrap();
            prop_assert_eq!(&a, &b);
            let all_rel = map_at_k(&[q], &[LabelVector::from_classes(1, &[0])], &idx, codes.len()).unwrap();
            prop_assert_eq!(all_rel, 1.0);
        }
    }
}
