//! Corpus file formats and the synthetic corpus generator.
//!
//! Features live in binary embedding tables (`*.emb`) with a sidecar id list
//! (`*.ids`). Everything else is tab-separated text with a one-line version
//! header. Records reference features by id, and loading resolves and
//! validates every reference before returning.

mod synth;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::tensorgrad::DenseVec;

pub use synth::{synth_generate, SynthConfig};

pub const EMBEDDING_MAGIC: &[u8; 8] = b"CREMB001";

/// Ids paired with equally sized feature rows.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    ids: Vec<String>,
    rows: Vec<DenseVec>,
    position: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, ids: Vec<String>, rows: Vec<DenseVec>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("embedding dim must be positive".into()));
        }
        if ids.len() != rows.len() {
            return Err(Error::shape("embedding table", ids.len(), rows.len()));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::shape("embedding table", dim, r.len()));
        }
        let mut position = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            check_id(id)?;
            if position.insert(id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate id `{id}`")));
            }
        }
        Ok(Self {
            dim,
            ids,
            rows,
            position,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn rows(&self) -> &[DenseVec] {
        &self.rows
    }

    pub fn get(&self, id: &str) -> Option<&DenseVec> {
        self.position.get(id).map(|&i| &self.rows[i])
    }

    pub fn require(&self, id: &str) -> Result<&DenseVec> {
        self.get(id).ok_or_else(|| Error::UnknownId(id.to_owned()))
    }

    /// The rows for `ids`, in that order.
    pub fn subset(&self, ids: &[String]) -> Result<Self> {
        let rows = ids
            .iter()
            .map(|id| self.require(id).cloned())
            .collect::<Result<_>>()?;
        Self::new(self.dim, ids.to_vec(), rows)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = EMBEDDING_MAGIC.to_vec();
        out.extend_from_slice(&u32_of(self.len())?.to_le_bytes());
        out.extend_from_slice(&u32_of(self.dim)?.to_le_bytes());
        for row in &self.rows {
            for v in row.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn ids_text(&self) -> String {
        let mut s = String::from("# ids v1\n");
        for id in &self.ids {
            s.push_str(id);
            s.push('\n');
        }
        s
    }

    /// Parses the binary table and its id list. `origin` labels errors.
    pub fn from_parts(bytes: &[u8], ids_text: &str, origin: &str) -> Result<Self> {
        let bad = |msg: &str| Error::parse(origin, 0, msg);
        let rest = bytes
            .strip_prefix(EMBEDDING_MAGIC.as_slice())
            .ok_or_else(|| bad("bad magic"))?;
        if rest.len() < 8 {
            return Err(bad("truncated header"));
        }
        let count = u32::from_le_bytes(rest[0..4].try_into().expect("4 bytes")) as usize;
        let dim = u32::from_le_bytes(rest[4..8].try_into().expect("4 bytes")) as usize;
        let body = &rest[8..];
        let want = count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| bad("size overflow"))?;
        if body.len() != want {
            return Err(bad(&format!(
                "expected {want} value bytes for {count}x{dim}, found {}",
                body.len()
            )));
        }
        let values: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite value"));
        }
        let ids_origin = format!("{origin}.ids");
        let ids = parse_ids(ids_text, &ids_origin)?;
        if ids.len() != count {
            return Err(Error::Validation(format!(
                "{ids_origin}: {} ids for {count} rows",
                ids.len()
            )));
        }
        let rows = if dim == 0 {
            Vec::new()
        } else {
            values
                .chunks_exact(dim)
                .map(|c| DenseVec::new(c.to_vec()))
                .collect::<Result<_>>()?
        };
        Self::new(dim, ids, rows)
    }

    /// Writes `path` and its sidecar (`path` with extension `ids`).
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)?;
        write_atomic(&ids_path(path), self.ids_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let ids = fs::read_to_string(ids_path(path))?;
        Self::from_parts(&bytes, &ids, &path.display().to_string())
    }
}

pub fn ids_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("ids")
}

fn u32_of(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidInput(format!("{v} exceeds u32")))
}

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || id.chars().any(char::is_whitespace) || id.starts_with('#') {
        return Err(Error::Validation(format!("invalid id `{id}`")));
    }
    Ok(())
}

fn parse_ids(text: &str, origin: &str) -> Result<Vec<String>> {
    let mut lines = body_lines(text, origin, "ids")?;
    let mut ids = Vec::new();
    for (n, line) in &mut lines {
        check_id(line).map_err(|e| Error::parse(origin, n, e.to_string()))?;
        ids.push(line.to_owned());
    }
    Ok(ids)
}

/// Checks the `# <kind> v1` header and yields `(line_number, line)` for the
/// remaining lines.
fn body_lines<'a>(
    text: &'a str,
    origin: &str,
    kind: &str,
) -> Result<impl Iterator<Item = (usize, &'a str)> + 'a> {
    let header = text
        .lines()
        .next()
        .ok_or_else(|| Error::parse(origin, 1, "missing header"))?;
    let prefix = format!("# {kind} v1");
    if header != prefix && !header.starts_with(&format!("{prefix} ")) {
        return Err(Error::parse(
            origin,
            1,
            format!("expected header `{prefix}`"),
        ));
    }
    Ok(text.lines().enumerate().skip(1).map(|(i, l)| (i + 1, l)))
}

fn header_fields(text: &str) -> HashMap<&str, &str> {
    text.lines()
        .next()
        .unwrap_or_default()
        .split_whitespace()
        .filter_map(|f| f.split_once('='))
        .collect()
}

fn fields<'a>(line: &'a str, n: usize, origin: &str, want: &[usize]) -> Result<Vec<&'a str>> {
    let f: Vec<&str> = line.split('\t').collect();
    if !want.contains(&f.len()) {
        return Err(Error::parse(
            origin,
            n,
            format!("expected {want:?} tab-separated fields, found {}", f.len()),
        ));
    }
    for field in &f {
        check_id(field).map_err(|_| Error::parse(origin, n, format!("bad field `{field}`")))?;
    }
    Ok(f)
}

fn resolve<'a>(
    table: &'a EmbeddingTable,
    id: &str,
    n: usize,
    origin: &str,
) -> Result<&'a DenseVec> {
    table
        .get(id)
        .ok_or_else(|| Error::Validation(format!("{origin}:{n}: unknown id `{id}`")))
}

fn unique_id(seen: &mut HashSet<String>, id: &str, n: usize, origin: &str) -> Result<()> {
    if !seen.insert(id.to_owned()) {
        return Err(Error::parse(
            origin,
            n,
            format!("duplicate record id `{id}`"),
        ));
    }
    Ok(())
}

/// Image and text feature tables that corpus records point into.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTables {
    pub images: EmbeddingTable,
    pub texts: EmbeddingTable,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairExample {
    pub id: String,
    pub image_id: String,
    pub image_features: DenseVec,
    pub text_id: String,
    pub text_features: DenseVec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributeExample {
    pub id: String,
    pub image_id: String,
    pub image_features: DenseVec,
    /// Sorted, unique, each below the vocabulary size.
    pub attributes: Vec<usize>,
}

impl AttributeExample {
    /// Multi-hot labels over a vocabulary of `vocab` attributes.
    pub fn label_vector(&self, vocab: usize) -> Vec<f64> {
        let mut y = vec![0.0; vocab];
        for &a in &self.attributes {
            y[a] = 1.0;
        }
        y
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributeCorpus {
    pub vocab: usize,
    pub examples: Vec<AttributeExample>,
}

/// Which modality carries the signal in a synthetic triplet.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Slice {
    /// The text describes only the change; both inputs are needed.
    Compose,
    /// The text fully describes the target.
    Text,
    /// The text carries no signal; the target is near the reference.
    Image,
}

impl Slice {
    pub const ALL: [Slice; 3] = [Slice::Compose, Slice::Text, Slice::Image];

    pub fn tag(self) -> &'static str {
        match self {
            Slice::Compose => "compose",
            Slice::Text => "text",
            Slice::Image => "image",
        }
    }
}

impl FromStr for Slice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Slice::ALL
            .into_iter()
            .find(|k| k.tag() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown slice `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletExample {
    pub id: String,
    pub reference_id: String,
    pub reference_features: DenseVec,
    pub text_id: String,
    pub text_features: DenseVec,
    pub target_id: String,
    pub slice: Option<Slice>,
}

/// A named candidate pool.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub name: String,
    pub ids: Vec<String>,
}

impl SplitSpec {
    pub fn new(name: impl Into<String>, ids: Vec<String>) -> Result<Self> {
        let name = name.into();
        check_id(&name)?;
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            check_id(id)?;
            if !seen.insert(id.as_str()) {
                return Err(Error::Validation(format!(
                    "split `{name}`: duplicate id `{id}`"
                )));
            }
        }
        Ok(Self { name, ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusKind {
    Pairs,
    Attributes,
    Triplets,
    Embeddings,
    Split,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Corpus {
    Pairs(Vec<PairExample>),
    Attributes(AttributeCorpus),
    Triplets(Vec<TripletExample>),
    Embeddings(EmbeddingTable),
    Split(SplitSpec),
}

/// Loads one corpus file. Record files need `tables` to resolve ids.
pub fn load_corpus(
    path: &Path,
    kind: CorpusKind,
    tables: Option<&FeatureTables>,
) -> Result<Corpus> {
    if kind == CorpusKind::Embeddings {
        return EmbeddingTable::load(path).map(Corpus::Embeddings);
    }
    let text = fs::read_to_string(path)?;
    let origin = path.display().to_string();
    if kind == CorpusKind::Split {
        return parse_split(&text, &origin).map(Corpus::Split);
    }
    let tables =
        tables.ok_or_else(|| Error::InvalidInput(format!("{origin}: feature tables required")))?;
    Ok(match kind {
        CorpusKind::Pairs => Corpus::Pairs(parse_pairs(&text, &origin, tables)?),
        CorpusKind::Attributes => Corpus::Attributes(parse_attributes(&text, &origin, tables)?),
        CorpusKind::Triplets => Corpus::Triplets(parse_triplets(&text, &origin, tables)?),
        CorpusKind::Embeddings | CorpusKind::Split => unreachable!(),
    })
}

pub fn pairs_text(pairs: &[PairExample]) -> String {
    let mut s = String::from("# pairs v1\n");
    for p in pairs {
        let _ = writeln!(s, "{}\t{}\t{}", p.id, p.image_id, p.text_id);
    }
    s
}

pub fn parse_pairs(text: &str, origin: &str, tables: &FeatureTables) -> Result<Vec<PairExample>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (n, line) in body_lines(text, origin, "pairs")? {
        let f = fields(line, n, origin, &[3])?;
        unique_id(&mut seen, f[0], n, origin)?;
        out.push(PairExample {
            id: f[0].to_owned(),
            image_id: f[1].to_owned(),
            image_features: resolve(&tables.images, f[1], n, origin)?.clone(),
            text_id: f[2].to_owned(),
            text_features: resolve(&tables.texts, f[2], n, origin)?.clone(),
        });
    }
    Ok(out)
}

pub fn attributes_text(corpus: &AttributeCorpus) -> String {
    let mut s = format!("# attributes v1 vocab={}\n", corpus.vocab);
    for a in &corpus.examples {
        let attrs = if a.attributes.is_empty() {
            "-".to_owned()
        } else {
            a.attributes
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(",")
        };
        let _ = writeln!(s, "{}\t{}\t{attrs}", a.id, a.image_id);
    }
    s
}

pub fn parse_attributes(
    text: &str,
    origin: &str,
    tables: &FeatureTables,
) -> Result<AttributeCorpus> {
    let lines = body_lines(text, origin, "attributes")?;
    let vocab: usize = header_fields(text)
        .get("vocab")
        .and_then(|v| v.parse().ok())
        .filter(|&v| v > 0)
        .ok_or_else(|| Error::parse(origin, 1, "header needs vocab=<positive integer>"))?;
    let mut seen = HashSet::new();
    let mut examples = Vec::new();
    for (n, line) in lines {
        let f = fields(line, n, origin, &[3])?;
        unique_id(&mut seen, f[0], n, origin)?;
        let mut attrs = BTreeSet::new();
        if f[2] != "-" {
            for a in f[2].split(',') {
                let a: usize = a
                    .parse()
                    .map_err(|_| Error::parse(origin, n, format!("bad attribute index `{a}`")))?;
                if a >= vocab {
                    return Err(Error::parse(
                        origin,
                        n,
                        format!("attribute {a} outside vocabulary of {vocab}"),
                    ));
                }
                attrs.insert(a);
            }
        }
        examples.push(AttributeExample {
            id: f[0].to_owned(),
            image_id: f[1].to_owned(),
            image_features: resolve(&tables.images, f[1], n, origin)?.clone(),
            attributes: attrs.into_iter().collect(),
        });
    }
    Ok(AttributeCorpus { vocab, examples })
}

pub fn triplets_text(triplets: &[TripletExample]) -> String {
    let mut s = String::from("# triplets v1\n");
    for t in triplets {
        let _ = write!(
            s,
            "{}\t{}\t{}\t{}",
            t.id, t.reference_id, t.text_id, t.target_id
        );
        if let Some(slice) = t.slice {
            let _ = write!(s, "\t{}", slice.tag());
        }
        s.push('\n');
    }
    s
}

/// Targets must exist in the image table; membership in a particular
/// candidate split is checked by [`validate_targets`].
pub fn parse_triplets(
    text: &str,
    origin: &str,
    tables: &FeatureTables,
) -> Result<Vec<TripletExample>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (n, line) in body_lines(text, origin, "triplets")? {
        let f = fields(line, n, origin, &[4, 5])?;
        unique_id(&mut seen, f[0], n, origin)?;
        resolve(&tables.images, f[3], n, origin)?;
        let slice = match f.get(4) {
            Some(s) => Some(
                s.parse()
                    .map_err(|e: Error| Error::parse(origin, n, e.to_string()))?,
            ),
            None => None,
        };
        out.push(TripletExample {
            id: f[0].to_owned(),
            reference_id: f[1].to_owned(),
            reference_features: resolve(&tables.images, f[1], n, origin)?.clone(),
            text_id: f[2].to_owned(),
            text_features: resolve(&tables.texts, f[2], n, origin)?.clone(),
            target_id: f[3].to_owned(),
            slice,
        });
    }
    Ok(out)
}

pub fn split_text(split: &SplitSpec) -> String {
    let mut s = format!("# split v1 name={}\n", split.name);
    for id in &split.ids {
        s.push_str(id);
        s.push('\n');
    }
    s
}

pub fn parse_split(text: &str, origin: &str) -> Result<SplitSpec> {
    let lines = body_lines(text, origin, "split")?;
    let name = header_fields(text)
        .get("name")
        .map(|s| s.to_string())
        .ok_or_else(|| Error::parse(origin, 1, "header needs name=<split name>"))?;
    let mut ids = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in lines {
        check_id(line).map_err(|e| Error::parse(origin, n, e.to_string()))?;
        if !seen.insert(line) {
            return Err(Error::parse(origin, n, format!("duplicate id `{line}`")));
        }
        ids.push(line.to_owned());
    }
    SplitSpec::new(name, ids)
}

/// Every triplet target must be a member of `split`.
pub fn validate_targets(triplets: &[TripletExample], split: &SplitSpec) -> Result<()> {
    let members: HashSet<&str> = split.ids.iter().map(String::as_str).collect();
    match triplets
        .iter()
        .find(|t| !members.contains(t.target_id.as_str()))
    {
        Some(t) => Err(Error::Validation(format!(
            "triplet `{}`: target `{}` is not in split `{}`",
            t.id, t.target_id, split.name
        ))),
        None => Ok(()),
    }
}

/// A complete corpus directory.
///
/// | file | contents |
/// |---|---|
/// | `images.emb`, `images.ids` | every image feature vector |
/// | `texts.emb`, `texts.ids` | every text feature vector |
/// | `pairs.tsv` | in-domain image/text pairs |
/// | `generic_pairs.tsv` | out-of-domain pairs for initial pretraining |
/// | `attributes.tsv` | attribute annotations |
/// | `triplets_train.tsv`, `triplets_test.tsv` | composed-query triplets |
/// | `split_train.tsv`, `split_original.tsv`, `split_val.tsv` | candidate pools |
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub tables: FeatureTables,
    pub pairs: Vec<PairExample>,
    pub generic_pairs: Vec<PairExample>,
    pub attributes: AttributeCorpus,
    pub train_triplets: Vec<TripletExample>,
    pub test_triplets: Vec<TripletExample>,
    pub splits: Vec<SplitSpec>,
}

pub const TRAIN_SPLIT: &str = "train";
pub const ORIGINAL_SPLIT: &str = "original";
pub const VAL_SPLIT: &str = "val";

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&SplitSpec> {
        self.splits
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown split `{name}`")))
    }

    /// Image features of the split's members, in split order.
    pub fn candidates(&self, split: &str) -> Result<EmbeddingTable> {
        self.tables.images.subset(&self.split(split)?.ids)
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.splits {
            for id in &s.ids {
                self.tables.images.require(id)?;
            }
        }
        validate_targets(&self.train_triplets, self.split(TRAIN_SPLIT)?)?;
        validate_targets(&self.test_triplets, self.split(ORIGINAL_SPLIT)?)?;
        Ok(())
    }

    pub fn files(&self) -> Result<Vec<(String, Vec<u8>)>> {
        let mut files = vec![
            ("images.emb".into(), self.tables.images.to_bytes()?),
            (
                "images.ids".into(),
                self.tables.images.ids_text().into_bytes(),
            ),
            ("texts.emb".into(), self.tables.texts.to_bytes()?),
            (
                "texts.ids".into(),
                self.tables.texts.ids_text().into_bytes(),
            ),
            ("pairs.tsv".into(), pairs_text(&self.pairs).into_bytes()),
            (
                "generic_pairs.tsv".into(),
                pairs_text(&self.generic_pairs).into_bytes(),
            ),
            (
                "attributes.tsv".into(),
                attributes_text(&self.attributes).into_bytes(),
            ),
            (
                "triplets_train.tsv".into(),
                triplets_text(&self.train_triplets).into_bytes(),
            ),
            (
                "triplets_test.tsv".into(),
                triplets_text(&self.test_triplets).into_bytes(),
            ),
        ];
        for s in &self.splits {
            files.push((format!("split_{}.tsv", s.name), split_text(s).into_bytes()));
        }
        Ok(files)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, bytes) in self.files()? {
            write_atomic(&dir.join(name), &bytes)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let tables = FeatureTables {
            images: EmbeddingTable::load(&dir.join("images.emb"))?,
            texts: EmbeddingTable::load(&dir.join("texts.emb"))?,
        };
        let read = |name: &str| -> Result<(String, String)> {
            let path = dir.join(name);
            Ok((fs::read_to_string(&path)?, path.display().to_string()))
        };
        let (t, o) = read("pairs.tsv")?;
        let pairs = parse_pairs(&t, &o, &tables)?;
        let (t, o) = read("generic_pairs.tsv")?;
        let generic_pairs = parse_pairs(&t, &o, &tables)?;
        let (t, o) = read("attributes.tsv")?;
        let attributes = parse_attributes(&t, &o, &tables)?;
        let (t, o) = read("triplets_train.tsv")?;
        let train_triplets = parse_triplets(&t, &o, &tables)?;
        let (t, o) = read("triplets_test.tsv")?;
        let test_triplets = parse_triplets(&t, &o, &tables)?;
        let mut splits = Vec::new();
        for name in [TRAIN_SPLIT, ORIGINAL_SPLIT, VAL_SPLIT] {
            let (t, o) = read(&format!("split_{name}.tsv"))?;
            let split = parse_split(&t, &o)?;
            if split.name != name {
                return Err(Error::parse(&o, 1, format!("expected name={name}")));
            }
            splits.push(split);
        }
        let ds = Self {
            tables,
            pairs,
            generic_pairs,
            attributes,
            train_triplets,
            test_triplets,
            splits,
        };
        ds.validate()?;
        Ok(ds)
    }
}
