//! Seeded synthetic corpora.
//!
//! Items are binary attribute vectors. An image feature is the attribute
//! vector plus Gaussian noise; a text feature is a signed vector in attribute
//! space. Triplets come in three slices:
//!
//! * compose: the target is `flips_compose` flips away from the reference and
//!   the text holds only the flip delta (`+1` turned on, `-1` turned off);
//! * text: the target is an unrelated item and the text is its full
//!   description (`2x - 1`);
//! * image: the target is `flips_image` flips away and the text is noise.
//!
//! Reference and target images both come from the same catalog, so the
//! reference itself is always a competing candidate.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{
    AttributeCorpus, AttributeExample, Dataset, EmbeddingTable, FeatureTables, PairExample, Slice,
    SplitSpec, TripletExample, ORIGINAL_SPLIT, TRAIN_SPLIT, VAL_SPLIT,
};
use crate::error::{Error, Result};
use crate::tensorgrad::DenseVec;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub attributes: usize,
    /// Probability that an attribute is on.
    pub density: f64,
    pub image_noise: f64,
    pub text_noise: f64,
    pub train_items: usize,
    /// Size of the evaluation catalog (the `original` split).
    pub test_items: usize,
    pub pairs_per_item: usize,
    pub generic_pairs: usize,
    pub train_triplets: usize,
    pub test_triplets: usize,
    pub flips_compose: usize,
    pub flips_image: usize,
    /// Proportions of compose, text and image triplets.
    pub mix: [f64; 3],
    /// Fraction of non-target test items kept in the `val` split.
    pub val_keep: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            attributes: 10,
            density: 0.5,
            image_noise: 0.3,
            text_noise: 0.3,
            train_items: 600,
            test_items: 300,
            pairs_per_item: 2,
            generic_pairs: 1200,
            train_triplets: 500,
            test_triplets: 500,
            flips_compose: 2,
            flips_image: 1,
            mix: [0.6, 0.2, 0.2],
            val_keep: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.attributes < 2 || self.attributes > 24 {
            return bad(format!(
                "attributes must be in [2, 24], got {}",
                self.attributes
            ));
        }
        if !(self.density > 0.0 && self.density < 1.0) {
            return bad(format!("density must be in (0, 1), got {}", self.density));
        }
        for (name, v) in [
            ("image_noise", self.image_noise),
            ("text_noise", self.text_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        for (name, v) in [
            ("train_items", self.train_items),
            ("test_items", self.test_items),
            ("pairs_per_item", self.pairs_per_item),
            ("generic_pairs", self.generic_pairs),
            ("train_triplets", self.train_triplets),
            ("test_triplets", self.test_triplets),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        let patterns = 1usize << self.attributes;
        if 4 * self.train_items > 3 * patterns || 4 * self.test_items > 3 * patterns {
            return bad(format!(
                "catalogs of {}/{} unique items do not fit comfortably in {patterns} patterns",
                self.train_items, self.test_items
            ));
        }
        for (name, k) in [
            ("flips_compose", self.flips_compose),
            ("flips_image", self.flips_image),
        ] {
            if k > self.attributes {
                return bad(format!(
                    "{name} = {k} exceeds {} attributes",
                    self.attributes
                ));
            }
        }
        if self.flips_compose == 0 {
            return bad("flips_compose must be at least 1".into());
        }
        if self.mix.iter().any(|m| !(m.is_finite() && *m >= 0.0))
            || self.mix.iter().sum::<f64>() <= 0.0
        {
            return bad(format!(
                "mix must be non-negative with a positive sum, got {:?}",
                self.mix
            ));
        }
        if !(0.0..=1.0).contains(&self.val_keep) {
            return bad(format!("val_keep must be in [0, 1], got {}", self.val_keep));
        }
        Ok(())
    }
}

type Item = Vec<u8>;

struct Builder {
    cfg: SynthConfig,
    rng: ChaCha8Rng,
    image_ids: Vec<String>,
    image_rows: Vec<DenseVec>,
    text_ids: Vec<String>,
    text_rows: Vec<DenseVec>,
}

impl Builder {
    fn gaussian(&mut self, sigma: f64) -> f64 {
        let z: f64 = self.rng.sample(StandardNormal);
        sigma * z
    }

    fn item(&mut self, free: usize) -> Item {
        let d = self.cfg.attributes;
        (0..d)
            .map(|i| u8::from(i < free && self.rng.random_bool(self.cfg.density)))
            .collect()
    }

    fn catalog(&mut self, count: usize) -> Result<Vec<Item>> {
        let mut seen = HashSet::with_capacity(count);
        let mut items = Vec::with_capacity(count);
        let mut tries = 0usize;
        while items.len() < count {
            tries += 1;
            if tries > count * 1000 {
                return Err(Error::Config("cannot draw enough unique items".into()));
            }
            let it = self.item(self.cfg.attributes);
            if seen.insert(it.clone()) {
                items.push(it);
            }
        }
        Ok(items)
    }

    fn add_image(&mut self, id: String, item: &Item) -> Result<()> {
        let sigma = self.cfg.image_noise;
        let v = item
            .iter()
            .map(|&x| f64::from(x) + self.gaussian(sigma))
            .collect();
        self.image_ids.push(id);
        self.image_rows.push(DenseVec::new(v)?);
        Ok(())
    }

    fn add_text(&mut self, id: String, signal: &[f64]) -> Result<()> {
        let sigma = self.cfg.text_noise;
        let v = signal.iter().map(|&s| s + self.gaussian(sigma)).collect();
        self.text_ids.push(id);
        self.text_rows.push(DenseVec::new(v)?);
        Ok(())
    }

    fn neighbour(&mut self, items: &[Item], r: usize, k: usize) -> Option<usize> {
        let found: Vec<usize> = (0..items.len())
            .filter(|&j| hamming(&items[r], &items[j]) == k)
            .collect();
        found
            .get(self.rng.random_range(0..found.len().max(1)))
            .copied()
    }

    fn slice(&mut self) -> Slice {
        let total: f64 = self.cfg.mix.iter().sum();
        let mut u = self.rng.random_range(0.0..total);
        for (s, &m) in Slice::ALL.iter().zip(&self.cfg.mix) {
            if u < m {
                return *s;
            }
            u -= m;
        }
        Slice::Image
    }

    fn triplets(
        &mut self,
        tag: &str,
        count: usize,
        items: &[Item],
        ids: &[String],
    ) -> Result<Vec<TripletExample>> {
        let mut out = Vec::with_capacity(count);
        for q in 0..count {
            let slice = self.slice();
            let (r, t) = self.pick(slice, items)?;
            let signal: Vec<f64> = match slice {
                Slice::Compose => items[r]
                    .iter()
                    .zip(&items[t])
                    .map(|(&a, &b)| f64::from(b) - f64::from(a))
                    .collect(),
                Slice::Text => items[t].iter().map(|&b| 2.0 * f64::from(b) - 1.0).collect(),
                Slice::Image => vec![0.0; self.cfg.attributes],
            };
            let text_id = format!("{tag}t{q:05}");
            self.add_text(text_id.clone(), &signal)?;
            out.push(TripletExample {
                id: format!("{tag}q{q:05}"),
                reference_id: ids[r].clone(),
                reference_features: DenseVec::zeros(1),
                text_id,
                text_features: self.text_rows.last().expect("just pushed").clone(),
                target_id: ids[t].clone(),
                slice: Some(slice),
            });
        }
        Ok(out)
    }

    fn pick(&mut self, slice: Slice, items: &[Item]) -> Result<(usize, usize)> {
        let n = items.len();
        let k = match slice {
            Slice::Compose => self.cfg.flips_compose,
            Slice::Image => self.cfg.flips_image,
            Slice::Text => {
                if n < 2 {
                    return Err(Error::Config("text triplets need two items".into()));
                }
                let r = self.rng.random_range(0..n);
                let t = (r + self.rng.random_range(1..n)) % n;
                return Ok((r, t));
            }
        };
        for _ in 0..1000 {
            let r = self.rng.random_range(0..n);
            if let Some(t) = self.neighbour(items, r, k) {
                return Ok((r, t));
            }
        }
        Err(Error::Config(format!(
            "no catalog items {k} flips apart; enlarge the catalog or reduce flips"
        )))
    }
}

fn hamming(a: &[u8], b: &[u8]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

fn description(item: &Item) -> Vec<f64> {
    item.iter().map(|&b| 2.0 * f64::from(b) - 1.0).collect()
}

/// Generates a complete dataset; identical configs give identical output.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let d = cfg.attributes;
    let mut b = Builder {
        cfg: cfg.clone(),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        image_ids: Vec::new(),
        image_rows: Vec::new(),
        text_ids: Vec::new(),
        text_rows: Vec::new(),
    };

    let train_items = b.catalog(cfg.train_items)?;
    let test_items = b.catalog(cfg.test_items)?;
    let train_ids: Vec<String> = (0..train_items.len())
        .map(|i| format!("tr{i:05}"))
        .collect();
    let test_ids: Vec<String> = (0..test_items.len()).map(|i| format!("te{i:05}")).collect();
    for (id, it) in train_ids.iter().zip(&train_items) {
        b.add_image(id.clone(), it)?;
    }
    for (id, it) in test_ids.iter().zip(&test_items) {
        b.add_image(id.clone(), it)?;
    }

    let mut pairs = Vec::new();
    for rep in 0..cfg.pairs_per_item {
        for (i, it) in train_items.iter().enumerate() {
            let n = rep * train_items.len() + i;
            b.add_text(format!("pt{n:05}"), &description(it))?;
            pairs.push((
                format!("p{n:05}"),
                train_ids[i].clone(),
                format!("pt{n:05}"),
            ));
        }
    }

    // Generic pairs only vary the first half of the attributes.
    let mut generic = Vec::new();
    for n in 0..cfg.generic_pairs {
        let it = b.item(d / 2);
        let image_id = format!("gi{n:05}");
        b.add_image(image_id.clone(), &it)?;
        b.add_text(format!("gt{n:05}"), &description(&it))?;
        generic.push((format!("g{n:05}"), image_id, format!("gt{n:05}")));
    }

    let mut train_triplets = b.triplets("tr", cfg.train_triplets, &train_items, &train_ids)?;
    let mut test_triplets = b.triplets("te", cfg.test_triplets, &test_items, &test_ids)?;

    let mut keep: Vec<bool> = test_ids
        .iter()
        .map(|_| b.rng.random_bool(cfg.val_keep))
        .collect();
    let targets: HashSet<&str> = test_triplets.iter().map(|t| t.target_id.as_str()).collect();
    for (k, id) in keep.iter_mut().zip(&test_ids) {
        *k |= targets.contains(id.as_str());
    }
    let val_ids: Vec<String> = test_ids
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(id, _)| id.clone())
        .collect();

    let images = EmbeddingTable::new(d, b.image_ids, b.image_rows)?;
    let texts = EmbeddingTable::new(d, b.text_ids, b.text_rows)?;
    for t in train_triplets.iter_mut().chain(test_triplets.iter_mut()) {
        t.reference_features = images.require(&t.reference_id)?.clone();
    }
    let resolve = |list: Vec<(String, String, String)>| -> Result<Vec<PairExample>> {
        list.into_iter()
            .map(|(id, image_id, text_id)| {
                Ok(PairExample {
                    image_features: images.require(&image_id)?.clone(),
                    text_features: texts.require(&text_id)?.clone(),
                    id,
                    image_id,
                    text_id,
                })
            })
            .collect()
    };
    let pairs = resolve(pairs)?;
    let generic_pairs = resolve(generic)?;
    let attributes = AttributeCorpus {
        vocab: d,
        examples: train_items
            .iter()
            .zip(&train_ids)
            .enumerate()
            .map(|(i, (it, id))| {
                Ok(AttributeExample {
                    id: format!("a{i:05}"),
                    image_id: id.clone(),
                    image_features: images.require(id)?.clone(),
                    attributes: (0..d).filter(|&a| it[a] == 1).collect(),
                })
            })
            .collect::<Result<_>>()?,
    };

    let ds = Dataset {
        tables: FeatureTables { images, texts },
        pairs,
        generic_pairs,
        attributes,
        train_triplets,
        test_triplets,
        splits: vec![
            SplitSpec::new(TRAIN_SPLIT, train_ids)?,
            SplitSpec::new(ORIGINAL_SPLIT, test_ids)?,
            SplitSpec::new(VAL_SPLIT, val_ids)?,
        ],
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            train_items: 200,
            test_items: 150,
            pairs_per_item: 1,
            generic_pairs: 50,
            train_triplets: 100,
            test_triplets: 80,
            seed,
            ..SynthConfig::default()
        }
    }

    fn attrs_of(ds: &Dataset, id: &str) -> Vec<f64> {
        ds.tables
            .images
            .get(id)
            .unwrap()
            .as_slice()
            .iter()
            .map(|x| x.round())
            .collect()
    }

    /// Nearest neighbour by squared distance; returns the 1-based rank of
    /// `target` with ties counted in its favour.
    fn nn_rank(query: &[f64], pool: &[(String, Vec<f64>)], target: &str) -> usize {
        let dist = |v: &[f64]| -> f64 { v.iter().zip(query).map(|(a, b)| (a - b).powi(2)).sum() };
        let t = pool.iter().find(|(id, _)| id == target).unwrap();
        let dt = dist(&t.1);
        1 + pool.iter().filter(|(_, v)| dist(v) < dt).count()
    }

    fn pool(ds: &Dataset, map: impl Fn(f64) -> f64) -> Vec<(String, Vec<f64>)> {
        ds.split(ORIGINAL_SPLIT)
            .unwrap()
            .ids
            .iter()
            .map(|id| (id.clone(), attrs_of(ds, id).into_iter().map(&map).collect()))
            .collect()
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth_generate(&small(5)).unwrap().files().unwrap();
        let b = synth_generate(&small(5)).unwrap().files().unwrap();
        let c = synth_generate(&small(6)).unwrap().files().unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn text_slice_is_solved_by_text_nearest_neighbour() {
        let cfg = SynthConfig {
            image_noise: 0.0,
            text_noise: 0.0,
            mix: [0.0, 1.0, 0.0],
            ..small(1)
        };
        let ds = synth_generate(&cfg).unwrap();
        let pool = pool(&ds, |x| 2.0 * x - 1.0);
        for t in &ds.test_triplets {
            assert_eq!(nn_rank(t.text_features.as_slice(), &pool, &t.target_id), 1);
        }
    }

    #[test]
    fn image_slice_without_flips_is_solved_by_image_nearest_neighbour() {
        let cfg = SynthConfig {
            image_noise: 0.0,
            text_noise: 0.0,
            mix: [0.0, 0.0, 1.0],
            flips_image: 0,
            ..small(2)
        };
        let ds = synth_generate(&cfg).unwrap();
        let pool = pool(&ds, |x| x);
        for t in &ds.test_triplets {
            assert_eq!(t.reference_id, t.target_id);
            assert_eq!(
                nn_rank(t.reference_features.as_slice(), &pool, &t.target_id),
                1
            );
        }
    }

    #[test]
    fn compose_slice_has_confounders() {
        let cfg = SynthConfig {
            image_noise: 0.0,
            text_noise: 0.0,
            mix: [1.0, 0.0, 0.0],
            ..small(3)
        };
        let ds = synth_generate(&cfg).unwrap();
        let ids = &ds.split(ORIGINAL_SPLIT).unwrap().ids;
        let mut confounded = 0;
        for t in &ds.test_triplets {
            let r = attrs_of(&ds, &t.reference_id);
            let delta = t.text_features.as_slice();
            let unflipped: Vec<usize> = (0..r.len()).filter(|&i| delta[i] == 0.0).collect();
            let sharing = ids
                .iter()
                .filter(|id| {
                    let c = attrs_of(&ds, id);
                    unflipped.iter().all(|&i| c[i] == r[i])
                })
                .count();
            // Image-only: the reference itself is closer than the target.
            let image_ambiguous = sharing >= 2 && t.reference_id != t.target_id;
            // Text-only: another candidate satisfies every stated change.
            let text_ambiguous = ids.iter().filter(|id| **id != t.target_id).any(|id| {
                let c = attrs_of(&ds, id);
                (0..r.len()).all(|i| match delta[i] {
                    d if d > 0.0 => c[i] == 1.0,
                    d if d < 0.0 => c[i] == 0.0,
                    _ => true,
                })
            });
            if image_ambiguous && text_ambiguous {
                confounded += 1;
            }
        }
        assert!(confounded * 2 >= ds.test_triplets.len(), "{confounded}");
    }

    #[test]
    fn targets_live_in_their_splits() {
        let ds = synth_generate(&small(4)).unwrap();
        assert_eq!(ds.split(ORIGINAL_SPLIT).unwrap().len(), 150);
        let val = ds.split(VAL_SPLIT).unwrap();
        assert!(val.len() < 150);
        super::super::validate_targets(&ds.test_triplets, val).unwrap();
        for t in &ds.train_triplets {
            assert!(t.target_id.starts_with("tr"));
        }
    }

    #[test]
    fn save_load_round_trip() {
        let ds = synth_generate(&small(7)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.files().unwrap(), ds.files().unwrap());
    }

    #[test]
    fn rejects_infeasible() {
        assert!(synth_generate(&SynthConfig {
            flips_compose: 11,
            ..small(0)
        })
        .is_err());
        assert!(synth_generate(&SynthConfig {
            test_items: 0,
            ..small(0)
        })
        .is_err());
    }
}
