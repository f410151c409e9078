//! Self-supervised importance-weight labels for the adaptive composer.
//!
//! Three baseline models (image-only, text-only, mean-pooling fusion) rank
//! the ground-truth target of every triplet. Each rank becomes an inverse
//! normalised rank `N / r`; the image and text scores are divided by the
//! fusion score and pushed through a sharpened softmax to give the target
//! distribution over {image, text}.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::checkpoint::write_atomic;
use crate::composers::ComposerKind;
use crate::datasets::{EmbeddingTable, TripletExample};
use crate::error::{Error, Result};
use crate::retrieval_eval::{CandidateIndex, RetrievalModel};
use crate::tensorgrad::{softmax, DenseVec};

/// Default sharpness of the pseudo-label softmax.
pub const TAU3_DEFAULT: f64 = 4.0;

const SIMPLEX_TOL: f64 = 1e-9;

/// A distribution over {image, text}.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PseudoWeight {
    w_image: f64,
    w_text: f64,
}

impl PseudoWeight {
    pub fn new(w_image: f64, w_text: f64) -> Result<Self> {
        let inside = |w: f64| (0.0..=1.0).contains(&w);
        if !(inside(w_image) && inside(w_text)) || (w_image + w_text - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidInput(format!(
                "[{w_image}, {w_text}] is not a distribution over two outcomes"
            )));
        }
        Ok(Self { w_image, w_text })
    }

    pub fn uniform() -> Self {
        Self {
            w_image: 0.5,
            w_text: 0.5,
        }
    }

    pub fn w_image(&self) -> f64 {
        self.w_image
    }

    pub fn w_text(&self) -> f64 {
        self.w_text
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.w_image, self.w_text]
    }
}

/// Ground-truth ranks under the three baseline models.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RankTriple {
    pub r_image: usize,
    pub r_text: usize,
    pub r_fuse: usize,
    pub n: usize,
}

impl RankTriple {
    pub fn new(r_image: usize, r_text: usize, r_fuse: usize, n: usize) -> Result<Self> {
        for r in [r_image, r_text, r_fuse] {
            check_rank(r, n)?;
        }
        Ok(Self {
            r_image,
            r_text,
            r_fuse,
            n,
        })
    }
}

fn check_rank(r: usize, n: usize) -> Result<()> {
    if n == 0 || r == 0 || r > n {
        return Err(Error::InvalidInput(format!("rank {r} outside 1..={n}")));
    }
    Ok(())
}

/// `(r / N)^-1`.
pub fn inverse_norm_rank(r: usize, n: usize) -> Result<f64> {
    check_rank(r, n)?;
    Ok(1.0 / (r as f64 / n as f64))
}

/// `softmax(tau3 * [s_image / s_fuse, s_text / s_fuse])`.
pub fn pseudo_weight(ranks: RankTriple, tau3: f64) -> Result<PseudoWeight> {
    let RankTriple {
        r_image,
        r_text,
        r_fuse,
        n,
    } = RankTriple::new(ranks.r_image, ranks.r_text, ranks.r_fuse, ranks.n)?;
    let s_image = inverse_norm_rank(r_image, n)?;
    let s_text = inverse_norm_rank(r_text, n)?;
    let s_fuse = inverse_norm_rank(r_fuse, n)?;
    let ratios = DenseVec::new(vec![s_image / s_fuse, s_text / s_fuse])?;
    let w = softmax(&ratios, tau3)?;
    PseudoWeight::new(w[0], w[1])
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkippedRecord {
    pub triplet_id: String,
    pub reason: String,
}

/// Pseudo labels keyed by triplet id.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelTable {
    pub tau3: f64,
    pub n: usize,
    labels: BTreeMap<String, PseudoWeight>,
    /// Records that could not be labelled. Not serialised.
    pub skipped: Vec<SkippedRecord>,
}

impl LabelTable {
    pub fn new(tau3: f64, n: usize) -> Self {
        Self {
            tau3,
            n,
            labels: BTreeMap::new(),
            skipped: Vec::new(),
        }
    }

    pub fn insert(&mut self, triplet_id: impl Into<String>, w: PseudoWeight) {
        self.labels.insert(triplet_id.into(), w);
    }

    pub fn get(&self, triplet_id: &str) -> Option<&PseudoWeight> {
        self.labels.get(triplet_id)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Entries in triplet-id order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &PseudoWeight)> {
        self.labels.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# pseudo_labels v1 tau3={} N={}\n# baselines=last-checkpoint\n",
            self.tau3, self.n
        );
        for (id, w) in &self.labels {
            let _ = writeln!(
                out,
                "{id}\t{}\t{}",
                format_sig9(w.w_image()),
                format_sig9(w.w_text())
            );
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(path, 1, "missing header"))?;
        let fields = header
            .strip_prefix("# pseudo_labels v1 ")
            .ok_or_else(|| Error::parse(path, 1, "expected `# pseudo_labels v1` header"))?;
        let mut tau3 = None;
        let mut n = None;
        for kv in fields.split_whitespace() {
            match kv.split_once('=') {
                Some(("tau3", v)) => tau3 = v.parse::<f64>().ok(),
                Some(("N", v)) => n = v.parse::<usize>().ok(),
                _ => {
                    return Err(Error::parse(
                        path,
                        1,
                        format!("unexpected header field `{kv}`"),
                    ))
                }
            }
        }
        let (Some(tau3), Some(n)) = (tau3, n) else {
            return Err(Error::parse(path, 1, "header needs tau3 and N"));
        };
        let mut table = Self::new(tau3, n);
        for (i, line) in lines {
            if line.starts_with('#') || line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            let [id, wi, wt] = parts[..] else {
                return Err(Error::parse(path, i + 1, "expected 3 tab-separated fields"));
            };
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::parse(path, i + 1, format!("bad number `{s}`")))
            };
            let w = PseudoWeight::new(num(wi)?, num(wt)?)
                .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
            if table.labels.insert(id.to_owned(), w).is_some() {
                return Err(Error::parse(
                    path,
                    i + 1,
                    format!("duplicate triplet id `{id}`"),
                ));
            }
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, path)
    }
}

/// Decimal text with 9 significant digits.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0.00000000".into();
    }
    // Exponent after rounding to 9 significant digits.
    let sci = format!("{x:.8e}");
    let exp: i32 = sci
        .rsplit_once('e')
        .and_then(|(_, e)| e.parse().ok())
        .expect("scientific format has an exponent");
    let decimals = (8 - exp).max(0) as usize;
    format!("{x:.decimals$}")
}

/// Ranks every triplet's target under the three baseline models and turns
/// the ranks into pseudo labels.
///
/// Candidates are every row of `candidates`, so `N = candidates.len()`.
/// Triplets whose target is not a candidate are skipped and reported in
/// [`LabelTable::skipped`].
pub fn generate_pseudo_labels<M: RetrievalModel>(
    triplets: &[TripletExample],
    image_model: &M,
    text_model: &M,
    fusion_model: &M,
    candidates: &EmbeddingTable,
    tau3: f64,
) -> Result<LabelTable> {
    for (model, want, role) in [
        (image_model, ComposerKind::ImageOnly, "image"),
        (text_model, ComposerKind::TextOnly, "text"),
        (fusion_model, ComposerKind::Mean, "fusion"),
    ] {
        if model.composer_kind() != want {
            return Err(Error::InvalidInput(format!(
                "{role} baseline must use the {want} composer, found {}",
                model.composer_kind()
            )));
        }
    }
    if !(tau3 > 0.0 && tau3.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "tau3 must be positive, got {tau3}"
        )));
    }

    let indexes = [image_model, text_model, fusion_model]
        .iter()
        .map(|m| CandidateIndex::encode(*m, candidates))
        .collect::<Result<Vec<_>>>()?;
    let n = indexes[0].len();

    let outcomes: Vec<Result<std::result::Result<PseudoWeight, String>>> = triplets
        .par_iter()
        .map(|t| {
            if !indexes[0].contains(&t.target_id) {
                return Ok(Err(format!("target `{}` is not a candidate", t.target_id)));
            }
            let mut ranks = [0usize; 3];
            for (slot, (model, index)) in ranks
                .iter_mut()
                .zip([image_model, text_model, fusion_model].iter().zip(&indexes))
            {
                let q = model.embed_query(&t.reference_features, &t.text_features)?;
                *slot = index.rank_of(&q, &t.target_id)?;
            }
            let triple = RankTriple::new(ranks[0], ranks[1], ranks[2], n)?;
            Ok(Ok(pseudo_weight(triple, tau3)?))
        })
        .collect();

    let mut table = LabelTable::new(tau3, n);
    for (t, outcome) in triplets.iter().zip(outcomes) {
        match outcome? {
            Ok(w) => table.insert(t.id.clone(), w),
            Err(reason) => table.skipped.push(SkippedRecord {
                triplet_id: t.id.clone(),
                reason,
            }),
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn inverse_norm_rank_examples() {
        assert_eq!(inverse_norm_rank(100, 100).unwrap(), 1.0);
        assert_eq!(inverse_norm_rank(1, 100).unwrap(), 100.0);
        assert_eq!(inverse_norm_rank(4, 100).unwrap(), 25.0);
        assert!(inverse_norm_rank(0, 100).is_err());
        assert!(inverse_norm_rank(101, 100).is_err());
    }

    /// Independent oracle: softmax written out with explicit exponentials.
    fn oracle(ri: f64, rt: f64, rf: f64, n: f64, tau: f64) -> (f64, f64) {
        let a = tau * ((n / ri) / (n / rf));
        let b = tau * ((n / rt) / (n / rf));
        let (ea, eb) = (a.exp(), b.exp());
        (ea / (ea + eb), eb / (ea + eb))
    }

    #[test]
    fn pseudo_weight_examples() {
        let w = pseudo_weight(RankTriple::new(7, 7, 3, 50).unwrap(), 4.0).unwrap();
        assert_eq!(w.as_array(), [0.5, 0.5]);

        let w = pseudo_weight(RankTriple::new(10, 2, 4, 100).unwrap(), 4.0).unwrap();
        let (oi, ot) = oracle(10.0, 2.0, 4.0, 100.0, 4.0);
        assert!((w.w_image() - oi).abs() < 1e-12);
        assert!((w.w_text() - ot).abs() < 1e-12);
        assert!((w.w_image() - 0.0016588).abs() < 1e-6);
        assert!((w.w_text() - 0.9983412).abs() < 1e-6);

        let w = pseudo_weight(RankTriple::new(1, 10, 1, 10).unwrap(), 4.0).unwrap();
        let (oi, ot2) = oracle(1.0, 10.0, 1.0, 10.0, 4.0);
        assert!((w.w_image() - oi).abs() < 1e-12);
        assert!((w.w_text() - ot2).abs() < 1e-12);
        assert!((w.w_image() - 0.9734030).abs() < 1e-6);
        assert!((w.w_text() - 0.0265970).abs() < 1e-6);
    }

    #[test]
    fn invalid_ranks_propagate() {
        assert!(RankTriple::new(0, 1, 1, 5).is_err());
        assert!(RankTriple::new(1, 6, 1, 5).is_err());
        let bad = RankTriple {
            r_image: 1,
            r_text: 1,
            r_fuse: 9,
            n: 5,
        };
        assert!(pseudo_weight(bad, 4.0).is_err());
    }

    #[test]
    fn pseudo_weight_rejects_off_simplex() {
        assert!(PseudoWeight::new(0.5, 0.6).is_err());
        assert!(PseudoWeight::new(-0.1, 1.1).is_err());
        assert!(PseudoWeight::new(1.0, 0.0).is_ok());
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(0.5), "0.500000000");
        assert_eq!(format_sig9(1.0), "1.00000000");
        assert_eq!(format_sig9(0.0016588010801), "0.00165880108");
        assert_eq!(format_sig9(0.99999999996), "1.00000000");
        assert_eq!(format_sig9(0.0), "0.00000000");
    }

    #[test]
    fn label_file_round_trip() {
        let mut t = LabelTable::new(4.0, 100);
        t.insert(
            "t2",
            pseudo_weight(RankTriple::new(10, 2, 4, 100).unwrap(), 4.0).unwrap(),
        );
        t.insert("t1", PseudoWeight::uniform());
        let text = t.to_text();
        assert!(text.starts_with("# pseudo_labels v1 tau3=4 N=100\n"));
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[2], "t1\t0.500000000\t0.500000000");
        let back = LabelTable::parse(&text, Path::new("mem")).unwrap();
        assert_eq!(back.to_text(), text);
        assert!((back.get("t2").unwrap().w_text() - 0.9983412).abs() < 1e-6);
    }

    #[test]
    fn label_file_errors_name_the_line() {
        let text = "# pseudo_labels v1 tau3=4 N=10\nt1\t0.5\t0.5\nt2\t0.5\n";
        let err = LabelTable::parse(text, Path::new("x.tsv")).unwrap_err();
        assert!(err.to_string().contains("x.tsv:3"), "{err}");
        assert!(LabelTable::parse("t1\t0.5\t0.5\n", Path::new("x")).is_err());
    }

    proptest! {
        #[test]
        fn better_text_rank_raises_text_weight(
            n in 2usize..500, ri in 1usize..500, rf in 1usize..500, rt in 2usize..500, tau in 0.5f64..8.0
        ) {
            prop_assume!(ri <= n && rf <= n && rt <= n);
            let worse = pseudo_weight(RankTriple::new(ri, rt, rf, n).unwrap(), tau).unwrap();
            let better = pseudo_weight(RankTriple::new(ri, rt - 1, rf, n).unwrap(), tau).unwrap();
            // Strict in exact arithmetic; saturated softmax can tie in f64.
            prop_assert!(better.w_text() >= worse.w_text());
            if worse.w_text() < 0.999 && worse.w_text() > 1e-9 {
                prop_assert!(better.w_text() > worse.w_text());
            }
        }

        #[test]
        fn fusion_rank_preserves_argmax(
            (n, ri, rt, rf1, rf2) in (2usize..300).prop_flat_map(|n| (Just(n), 1..=n, 1..=n, 1..=n, 1..=n))
        ) {
            let a = pseudo_weight(RankTriple::new(ri, rt, rf1, n).unwrap(), 4.0).unwrap();
            let b = pseudo_weight(RankTriple::new(ri, rt, rf2, n).unwrap(), 4.0).unwrap();
            let side = |w: PseudoWeight| w.w_image().partial_cmp(&w.w_text()).unwrap();
            prop_assert_eq!(side(a), side(b));
            prop_assert!((a.w_image() + a.w_text() - 1.0).abs() < 1e-12);
        }
    }
}
