//! Mainstay codes: the binary code closest (in weighted Hamming distance) to
//! all positives of a label and farthest from all negatives.
//!
//! For weights `w_p` on positive codes and `w_n` on negative codes, the
//! objective
//!
//! ```text
//! ψ(b) = Σ w_p D_H(b, b_p) - Σ w_n D_H(b, b_n)
//! ```
//!
//! is minimised over `{-1, +1}^K` by `sign(Σ w_p b_p - Σ w_n b_n)`, taken
//! bit by bit. [`brute_force_mainstay`] enumerates all codes for small `K`
//! and exists to check that claim.

use std::collections::BTreeMap;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::binio;
use crate::error::{check_len, Error, Result};
use crate::hashmodel::{sign, CodeDatabase, CodeSetKind, HashCode, LabelVector};

/// Largest `K` accepted by [`brute_force_mainstay`].
pub const MAX_EXHAUSTIVE_BITS: usize = 20;

/// Cosine similarity of two multi-hot label vectors.
pub fn label_cosine(a: &LabelVector, b: &LabelVector) -> Result<f64> {
    check_len("label cosine", a.len(), b.len())?;
    let (na, nb) = (a.count(), b.count());
    if na == 0 || nb == 0 {
        return Err(Error::ZeroLabel);
    }
    Ok(a.dot(b) as f64 / ((na * nb) as f64).sqrt())
}

/// Weighted positive and negative codes around one query label.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedNeighborhood {
    k: usize,
    positives: Vec<(HashCode, f64)>,
    negatives: Vec<(HashCode, f64)>,
}

impl WeightedNeighborhood {
    pub fn new(positives: Vec<(HashCode, f64)>, negatives: Vec<(HashCode, f64)>) -> Result<Self> {
        let k = positives
            .first()
            .or(negatives.first())
            .map_or(0, |(c, _)| c.len());
        for (code, w) in positives.iter().chain(&negatives) {
            check_len("neighborhood code", k, code.len())?;
            if !(w.is_finite() && *w >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "neighborhood weight must be finite and >= 0, got {w}"
                )));
            }
        }
        Ok(Self {
            k,
            positives,
            negatives,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn positives(&self) -> &[(HashCode, f64)] {
        &self.positives
    }

    pub fn negatives(&self) -> &[(HashCode, f64)] {
        &self.negatives
    }

    pub fn num_positives(&self) -> usize {
        self.positives.len()
    }

    pub fn num_negatives(&self) -> usize {
        self.negatives.len()
    }

    /// Set when one side is empty, so that side's term drops out of ψ.
    pub fn is_degenerate(&self) -> bool {
        self.positives.is_empty() || self.negatives.is_empty()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty() && self.negatives.is_empty()
    }

    /// Multiplies every weight by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let s = |v: &[(HashCode, f64)]| v.iter().map(|(c, w)| (c.clone(), w * factor)).collect();
        Self {
            k: self.k,
            positives: s(&self.positives),
            negatives: s(&self.negatives),
        }
    }
}

/// Positives share a class with `query` and get weight `s / N_p`; negatives
/// get `(1 - s) / N_n`, where `s` is the label cosine.
pub fn build_neighborhood(
    query: &LabelVector,
    codes: &[HashCode],
    labels: &[LabelVector],
) -> Result<WeightedNeighborhood> {
    check_len("neighborhood database", codes.len(), labels.len())?;
    if codes.is_empty() {
        return Err(Error::EmptyBatch("neighborhood needs a nonempty database"));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (code, label) in codes.iter().zip(labels) {
        let s = label_cosine(query, label)?;
        if query.overlaps(label) {
            pos.push((code, s));
        } else {
            neg.push((code, s));
        }
    }
    let np = pos.len() as f64;
    let nn = neg.len() as f64;
    WeightedNeighborhood::new(
        pos.into_iter().map(|(c, s)| (c.clone(), s / np)).collect(),
        neg.into_iter().map(|(c, s)| (c.clone(), (1.0 - s) / nn)).collect(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct MainstayCode {
    pub code: HashCode,
    pub psi_value: f64,
}

fn differing_bits(a: &HashCode, b: &HashCode) -> u32 {
    a.bits().iter().zip(b.bits()).filter(|(x, y)| x != y).count() as u32
}

/// Shared accumulation order so ψ of one code is bit-identical whichever
/// way its distances were obtained.
fn psi_from_distances(
    nbhd: &WeightedNeighborhood,
    pos_dist: impl Iterator<Item = u32>,
    neg_dist: impl Iterator<Item = u32>,
) -> f64 {
    let mut pos = 0.0;
    for ((_, w), d) in nbhd.positives.iter().zip(pos_dist) {
        pos += w * d as f64;
    }
    let mut neg = 0.0;
    for ((_, w), d) in nbhd.negatives.iter().zip(neg_dist) {
        neg += w * d as f64;
    }
    pos - neg
}

/// ψ(b): weighted distance to positives minus weighted distance to negatives.
pub fn psi(b: &HashCode, nbhd: &WeightedNeighborhood) -> f64 {
    psi_from_distances(
        nbhd,
        nbhd.positives.iter().map(|(c, _)| differing_bits(b, c)),
        nbhd.negatives.iter().map(|(c, _)| differing_bits(b, c)),
    )
}

/// Closed-form minimiser of ψ, `sign(0) = +1` per bit.
pub fn mainstay_code(nbhd: &WeightedNeighborhood) -> Result<MainstayCode> {
    if nbhd.is_empty() {
        return Err(Error::EmptyNeighborhood);
    }
    let mut acc = vec![0.0; nbhd.k];
    for (code, w) in &nbhd.positives {
        for (a, &b) in acc.iter_mut().zip(code.bits()) {
            *a += w * b as f64;
        }
    }
    for (code, w) in &nbhd.negatives {
        for (a, &b) in acc.iter_mut().zip(code.bits()) {
            *a -= w * b as f64;
        }
    }
    let code = HashCode::new(acc.iter().map(|&a| sign(a)).collect())?;
    let psi_value = psi(&code, nbhd);
    Ok(MainstayCode { code, psi_value })
}

/// Exhaustive argmin of ψ over all `2^K` codes.
///
/// Ties go to the code with `+1` at the lowest index where candidates differ.
pub fn brute_force_mainstay(nbhd: &WeightedNeighborhood) -> Result<MainstayCode> {
    if nbhd.is_empty() {
        return Err(Error::EmptyNeighborhood);
    }
    let k = nbhd.k;
    if k > MAX_EXHAUSTIVE_BITS {
        return Err(Error::CodeTooLong {
            k,
            max: MAX_EXHAUSTIVE_BITS,
        });
    }
    // Mask bit (k - 1 - i) set means entry i is -1, so ascending masks visit
    // +1 at index 0 first.
    let to_mask = |c: &HashCode| -> u32 {
        c.bits()
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == -1)
            .fold(0u32, |m, (i, _)| m | 1 << (k - 1 - i))
    };
    let pos: Vec<u32> = nbhd.positives.iter().map(|(c, _)| to_mask(c)).collect();
    let neg: Vec<u32> = nbhd.negatives.iter().map(|(c, _)| to_mask(c)).collect();
    let mut best_mask = 0u32;
    let mut best = f64::INFINITY;
    for mask in 0u32..(1u32 << k) {
        let v = psi_from_distances(
            nbhd,
            pos.iter().map(|&p| (p ^ mask).count_ones()),
            neg.iter().map(|&n| (n ^ mask).count_ones()),
        );
        if v < best {
            best = v;
            best_mask = mask;
        }
    }
    let code = HashCode::new(
        (0..k)
            .map(|i| if best_mask >> (k - 1 - i) & 1 == 1 { -1 } else { 1 })
            .collect(),
    )?;
    Ok(MainstayCode {
        code,
        psi_value: best,
    })
}

/// Mainstay code for `label` against a labelled code database.
pub fn mainstay_for_label(
    label: &LabelVector,
    codes: &[HashCode],
    labels: &[LabelVector],
) -> Result<MainstayCode> {
    let nbhd = build_neighborhood(label, codes, labels)?;
    if nbhd.num_positives() == 0 {
        return Err(Error::NoPositives);
    }
    mainstay_code(&nbhd)
}

/// Mainstay codes memoised per distinct label vector.
#[derive(Debug, Clone, Default)]
pub struct MainstayCache {
    entries: BTreeMap<LabelVector, MainstayCode>,
}

impl MainstayCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, label: &LabelVector) -> Option<&MainstayCode> {
        self.entries.get(label)
    }

    pub fn get_or_compute(
        &mut self,
        label: &LabelVector,
        codes: &[HashCode],
        labels: &[LabelVector],
    ) -> Result<&MainstayCode> {
        if !self.entries.contains_key(label) {
            let m = mainstay_for_label(label, codes, labels)?;
            self.entries.insert(label.clone(), m);
        }
        Ok(&self.entries[label])
    }

    /// Computes every missing label in parallel and inserts in label order.
    pub fn populate<'a>(
        &mut self,
        wanted: impl IntoIterator<Item = &'a LabelVector>,
        codes: &[HashCode],
        labels: &[LabelVector],
    ) -> Result<()> {
        let mut missing: Vec<&LabelVector> = wanted
            .into_iter()
            .filter(|l| !self.entries.contains_key(*l))
            .collect();
        missing.sort();
        missing.dedup();
        let computed: Vec<MainstayCode> = missing
            .par_iter()
            .map(|l| mainstay_for_label(l, codes, labels))
            .collect::<Result<_>>()?;
        for (l, m) in missing.into_iter().zip(computed) {
            self.entries.insert(l.clone(), m);
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LabelVector, &MainstayCode)> {
        self.entries.iter()
    }

    /// Export as a mainstay code set, rows sorted by [`label_key`].
    pub fn to_code_set(&self) -> Result<CodeDatabase> {
        let mut rows: Vec<(u64, &LabelVector, &MainstayCode)> = self
            .entries
            .iter()
            .map(|(l, m)| (label_key(l), l, m))
            .collect();
        rows.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(b.1)));
        let mut db = CodeDatabase::new(
            rows.iter().map(|r| r.2.code.clone()).collect(),
            rows.iter().map(|r| r.1.clone()).collect(),
        )?;
        db.kind = CodeSetKind::Mainstay;
        db.keys = rows.iter().map(|r| r.0).collect();
        Ok(db)
    }
}

/// First eight bytes (little-endian) of SHA-256 over the packed label bits.
pub fn label_key(label: &LabelVector) -> u64 {
    let mut packed = Vec::new();
    binio::pack_bits(label.bits().iter().map(|&b| b == 1), label.len(), &mut packed);
    let digest = Sha256::digest(&packed);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::random_neighborhood;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn code(bits: &[i8]) -> HashCode {
        HashCode::new(bits.to_vec()).unwrap()
    }

    fn label(bits: &[u8]) -> LabelVector {
        LabelVector::new(bits.to_vec()).unwrap()
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(label_cosine(&label(&[1, 0, 1]), &label(&[1, 0, 1])).unwrap(), 1.0);
        assert_eq!(label_cosine(&label(&[1, 0, 0]), &label(&[0, 1, 0])).unwrap(), 0.0);
        let c = label_cosine(&label(&[1, 1, 0]), &label(&[1, 0, 0])).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(matches!(
            label_cosine(&label(&[0, 0, 0]), &label(&[1, 0, 0])),
            Err(Error::ZeroLabel)
        ));
    }

    #[test]
    fn neighborhood_weights() {
        let q = label(&[1, 1]);
        let codes = vec![code(&[1, 1]), code(&[-1, -1])];
        // one positive with cosine 1/sqrt(2), one negative
        let nb = build_neighborhood(&label(&[1, 0]), &codes, &[q.clone(), label(&[0, 1])]).unwrap();
        assert_eq!(nb.positives()[0].1, label_cosine(&label(&[1, 0]), &q).unwrap());
        assert_eq!(nb.negatives()[0].1, 1.0);
        assert!(!nb.is_degenerate());

        let codes = vec![code(&[1, 1]), code(&[1, -1])];
        let nb = build_neighborhood(&label(&[1, 0]), &codes, &[label(&[1, 0]), label(&[1, 1])]).unwrap();
        let w: Vec<f64> = nb.positives().iter().map(|p| p.1).collect();
        // (1/2)·1 and (1/2)·(1/sqrt 2)
        assert_eq!(w[0], 0.5);
        assert!((w[1] - 0.5 / 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(nb.num_negatives(), 0);
        assert!(nb.is_degenerate());
    }

    #[test]
    fn neighborhood_with_cosines_one_and_half() {
        // y=[1,1,0,0] vs [1,1,0,0] → 1.0; vs [1,0,1,0] → 0.5
        let q = label(&[1, 1, 0, 0]);
        let codes = vec![code(&[1]), code(&[-1])];
        let nb = build_neighborhood(&q, &codes, &[label(&[1, 1, 0, 0]), label(&[1, 0, 1, 0])]).unwrap();
        assert_eq!(nb.positives()[0].1, 0.5);
        assert!((nb.positives()[1].1 - 0.25).abs() < 1e-15);
    }

    #[test]
    fn mainstay_hand_cases() {
        let nb = WeightedNeighborhood::new(vec![(code(&[1, -1, 1]), 1.0)], vec![]).unwrap();
        assert_eq!(mainstay_code(&nb).unwrap().code, code(&[1, -1, 1]));

        let nb = WeightedNeighborhood::new(
            vec![(code(&[1, 1]), 1.0)],
            vec![(code(&[-1, 1]), 0.5)],
        )
        .unwrap();
        assert_eq!(mainstay_code(&nb).unwrap().code, code(&[1, 1]));

        let nb = WeightedNeighborhood::new(
            vec![(code(&[1, 1]), 1.0)],
            vec![(code(&[-1, 1]), 1.0)],
        )
        .unwrap();
        assert_eq!(mainstay_code(&nb).unwrap().code, code(&[1, 1]));

        let empty = WeightedNeighborhood::new(vec![], vec![]).unwrap();
        assert!(matches!(mainstay_code(&empty), Err(Error::EmptyNeighborhood)));
    }

    #[test]
    fn psi_hand_cases() {
        let b = code(&[1, -1, 1, -1]);
        let nb = WeightedNeighborhood::new(vec![(b.clone(), 1.0)], vec![]).unwrap();
        assert_eq!(psi(&b, &nb), 0.0);
        assert_eq!(psi(&b.negated(), &nb), 4.0);
    }

    /// ψ through the inner-product identity `D_H = (K - b·b')/2`.
    fn psi_via_identity(b: &HashCode, nb: &WeightedNeighborhood) -> f64 {
        let k = nb.k() as f64;
        let mut inner = 0.0;
        for (kk, &bk) in b.bits().iter().enumerate() {
            let mut s = 0.0;
            for (c, w) in nb.positives() {
                s += w * c.bits()[kk] as f64;
            }
            for (c, w) in nb.negatives() {
                s -= w * c.bits()[kk] as f64;
            }
            inner += bk as f64 * s;
        }
        let wp: f64 = nb.positives().iter().map(|p| p.1).sum();
        let wn: f64 = nb.negatives().iter().map(|p| p.1).sum();
        let xi = 0.5 * k * (wp - wn);
        -0.5 * inner + xi
    }

    #[test]
    fn psi_matches_proof_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let k = rng.random_range(1..=16);
            let nb = random_neighborhood(&mut rng, k, 10, 10);
            let b = HashCode::new((0..k).map(|_| if rng.random() { 1 } else { -1 }).collect()).unwrap();
            assert!((psi(&b, &nb) - psi_via_identity(&b, &nb)).abs() < 1e-10);
        }
    }

    #[test]
    fn brute_force_agrees_with_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for case in 0..300 {
            let k = [4, 8, 12][case % 3];
            let nb = random_neighborhood(&mut rng, k, 25, 25);
            let closed = mainstay_code(&nb).unwrap();
            let exhaustive = brute_force_mainstay(&nb).unwrap();
            assert_eq!(closed.psi_value, exhaustive.psi_value, "case {case}");
        }
    }

    #[test]
    fn brute_force_simple_cases() {
        let b = code(&[1, -1, -1, 1, 1]);
        let nb = WeightedNeighborhood::new(vec![(b.clone(), 0.7)], vec![]).unwrap();
        assert_eq!(brute_force_mainstay(&nb).unwrap().code, b);
        let nb = WeightedNeighborhood::new(vec![(b.clone(), 0.2), (b.clone(), 0.9), (b.clone(), 0.4)], vec![]).unwrap();
        assert_eq!(brute_force_mainstay(&nb).unwrap().code, b);
        // all-zero weights: every code ties, +1 preference gives all ones
        let nb = WeightedNeighborhood::new(vec![(b.negated(), 0.0)], vec![]).unwrap();
        assert_eq!(brute_force_mainstay(&nb).unwrap().code, HashCode::ones(5));
        let long = WeightedNeighborhood::new(vec![(HashCode::ones(21), 1.0)], vec![]).unwrap();
        assert!(matches!(brute_force_mainstay(&long), Err(Error::CodeTooLong { .. })));
    }

    #[test]
    fn mainstay_beats_random_probes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let k = rng.random_range(4..=32);
            let nb = random_neighborhood(&mut rng, k, 25, 25);
            let m = mainstay_code(&nb).unwrap();
            for _ in 0..1000 {
                let b = HashCode::new((0..k).map(|_| if rng.random() { 1 } else { -1 }).collect()).unwrap();
                assert!(psi(&b, &nb) >= m.psi_value - 1e-12);
            }
        }
    }

    #[test]
    fn label_mainstay_and_cache() {
        let codes = vec![code(&[1, 1, -1]), code(&[1, 1, -1]), code(&[-1, -1, 1]), code(&[-1, 1, 1])];
        let labels = vec![label(&[1, 0]), label(&[1, 0]), label(&[0, 1]), label(&[0, 1])];
        let m = mainstay_for_label(&label(&[1, 0]), &codes, &labels).unwrap();
        assert_eq!(m.code, code(&[1, 1, -1]));
        let mut cache = MainstayCache::new();
        let first = cache.get_or_compute(&label(&[1, 0]), &codes, &labels).unwrap().clone();
        let again = cache.get_or_compute(&label(&[1, 0]), &codes, &labels).unwrap().clone();
        assert_eq!(first, again);
        assert_eq!(first, m);
        assert_eq!(cache.len(), 1);
        assert!(matches!(
            mainstay_for_label(&label(&[0, 0]), &codes, &labels),
            Err(Error::ZeroLabel)
        ));
        let three = vec![label(&[1, 0, 0]); 4];
        assert!(matches!(
            mainstay_for_label(&label(&[0, 0, 1]), &codes, &three),
            Err(Error::NoPositives)
        ));
    }

    #[test]
    fn single_label_class_mainstay_equals_sample_mainstay() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let labels: Vec<LabelVector> = (0..30).map(|i| LabelVector::from_classes(3, &[i % 3])).collect();
        let codes: Vec<HashCode> = (0..30)
            .map(|_| HashCode::new((0..8).map(|_| if rng.random() { 1 } else { -1 }).collect()).unwrap())
            .collect();
        let class1 = mainstay_for_label(&LabelVector::from_classes(3, &[1]), &codes, &labels).unwrap();
        let sample4 = mainstay_for_label(&labels[4], &codes, &labels).unwrap();
        assert_eq!(class1, sample4);
    }

    #[test]
    fn code_set_export_is_sorted_by_key() {
        let codes = vec![code(&[1, -1]), code(&[-1, 1]), code(&[-1, -1])];
        let labels = vec![label(&[1, 0, 0]), label(&[0, 1, 0]), label(&[0, 0, 1])];
        let mut cache = MainstayCache::new();
        cache.populate(labels.iter(), &codes, &labels).unwrap();
        let set = cache.to_code_set().unwrap();
        assert_eq!(set.kind, CodeSetKind::Mainstay);
        assert!(set.keys.windows(2).all(|w| w[0] <= w[1]));
        for (l, c) in set.labels.iter().zip(&set.codes) {
            assert_eq!(&cache.get(l).unwrap().code, c);
            assert_eq!(set.keys[set.labels.iter().position(|x| x == l).unwrap()], label_key(l));
        }
        assert_eq!(CodeDatabase::from_bytes(&set.to_bytes()).unwrap(), set);
    }

    proptest! {
        #[test]
        fn weight_scaling_preserves_mainstay(seed in any::<u64>(), factor in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let nb = random_neighborhood(&mut rng, 16, 20, 20);
            prop_assert_eq!(
                mainstay_code(&nb).unwrap().code,
                mainstay_code(&nb.scaled(factor)).unwrap().code
            );
        }

        #[test]
        fn bit_permutation_is_equivariant(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = 12;
            let nb = random_neighborhood(&mut rng, k, 20, 20);
            let mut perm: Vec<usize> = (0..k).collect();
            perm.shuffle(&mut rng);
            let permute = |c: &HashCode| HashCode::new(perm.iter().map(|&p| c.bits()[p]).collect()).unwrap();
            let pnb = WeightedNeighborhood::new(
                nb.positives().iter().map(|(c, w)| (permute(c), *w)).collect(),
                nb.negatives().iter().map(|(c, w)| (permute(c), *w)).collect(),
            ).unwrap();
            prop_assert_eq!(permute(&mainstay_code(&nb).unwrap().code), mainstay_code(&pnb).unwrap().code);
        }
    }
}
