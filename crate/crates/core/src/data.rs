//! Domain data model: users, questionnaire items, role-play answers, and the
//! JSON / JSON Lines formats they are stored in.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::Error as _;
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::encode::EmbeddingTable;
use crate::error::{Error, Result};

/// One of the four binary MBTI axes.
///
/// Label `1` on a dimension means the user sits on the first-named pole
/// (I, S, T, P); label `0` means the second pole (E, N, F, J).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Dimension {
    IE,
    SN,
    TF,
    PJ,
}

impl Dimension {
    pub const ALL: [Dimension; 4] = [Dimension::IE, Dimension::SN, Dimension::TF, Dimension::PJ];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        match self {
            Dimension::IE => 0,
            Dimension::SN => 1,
            Dimension::TF => 2,
            Dimension::PJ => 3,
        }
    }

    pub fn from_index(index: usize) -> Option<Dimension> {
        Dimension::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Dimension::IE => "IE",
            Dimension::SN => "SN",
            Dimension::TF => "TF",
            Dimension::PJ => "PJ",
        }
    }

    /// Pole letter for a binary label on this axis.
    pub fn pole(self, label: u8) -> char {
        let name = self.name().as_bytes();
        if label == 1 {
            name[0] as char
        } else {
            name[1] as char
        }
    }

    /// One-hot construct indicator.
    pub fn one_hot(self) -> [f64; 4] {
        let mut v = [0.0; 4];
        v[self.index()] = 1.0;
        v
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Dimension {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().replace('/', "").as_str() {
            "IE" => Ok(Dimension::IE),
            "SN" => Ok(Dimension::SN),
            "TF" => Ok(Dimension::TF),
            "PJ" => Ok(Dimension::PJ),
            _ => Err(Error::UnknownDimension(s.to_string())),
        }
    }
}

impl Serialize for Dimension {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Dimension {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(D::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];
}

/// Binary labels, one per dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Labels(pub [u8; 4]);

impl Labels {
    pub fn get(&self, dim: Dimension) -> u8 {
        self.0[dim.index()]
    }

    /// Four-letter type string such as `ISTP`.
    pub fn type_string(&self) -> String {
        Dimension::ALL.iter().map(|d| d.pole(self.get(*d))).collect()
    }

    fn from_map(map: &BTreeMap<String, u8>) -> Result<Labels> {
        let mut out = [u8::MAX; 4];
        for (key, &value) in map {
            let dim: Dimension = key.parse()?;
            if value > 1 {
                return Err(Error::Invalid(format!("label {key}={value} is not binary")));
            }
            out[dim.index()] = value;
        }
        if let Some(missing) = Dimension::ALL.iter().find(|d| out[d.index()] == u8::MAX) {
            return Err(Error::Invalid(format!("labels missing dimension {missing}")));
        }
        Ok(Labels(out))
    }
}

impl Serialize for Labels {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(4))?;
        for dim in Dimension::ALL {
            map.serialize_entry(dim.name(), &self.get(dim))?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for Labels {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let map = BTreeMap::<String, u8>::deserialize(d)?;
        Labels::from_map(&map).map_err(D::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UserRecord {
    pub user_id: String,
    pub posts: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<Labels>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Deserialize)]
struct RawUser {
    user_id: String,
    posts: Option<Vec<String>>,
    labels: Option<BTreeMap<String, u8>>,
    split: Option<Split>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetFormat {
    /// One JSON object per line.
    JsonLines,
    /// A single JSON array of user objects.
    JsonArray,
}

/// Load users. `sidecar` holds precomputed embeddings; a user with no posts
/// is accepted only when the sidecar has an entry for it.
pub fn load_dataset(
    path: &Path,
    format: DatasetFormat,
    sidecar: Option<&EmbeddingTable>,
) -> Result<Vec<UserRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: Vec<(usize, std::result::Result<RawUser, serde_json::Error>)> = match format {
        DatasetFormat::JsonLines => text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| (i + 1, serde_json::from_str::<RawUser>(l)))
            .collect(),
        DatasetFormat::JsonArray => {
            let values: Vec<serde_json::Value> =
                serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))?;
            values
                .into_iter()
                .enumerate()
                .map(|(i, v)| (i + 1, serde_json::from_value::<RawUser>(v)))
                .collect()
        }
    };

    let mut seen = HashSet::new();
    let mut records = Vec::with_capacity(raw.len());
    for (line, parsed) in raw {
        let user = parsed.map_err(|e| Error::parse(path, line, e.to_string()))?;
        let labels = match &user.labels {
            Some(map) => Some(Labels::from_map(map).map_err(|e| match e {
                Error::UnknownDimension(_) => e,
                other => Error::parse(path, line, other.to_string()),
            })?),
            None => None,
        };
        let posts = user.posts.unwrap_or_default();
        let has_sidecar = sidecar.is_some_and(|t| t.get(&user.user_id).is_some());
        if posts.is_empty() && !has_sidecar {
            return Err(Error::parse(
                path,
                line,
                format!("user `{}` has no posts and no precomputed embedding", user.user_id),
            ));
        }
        if !seen.insert(user.user_id.clone()) {
            return Err(Error::DuplicateUser(user.user_id));
        }
        records.push(UserRecord {
            user_id: user.user_id,
            posts,
            labels,
            split: user.split,
        });
    }
    Ok(records)
}

pub fn write_dataset(path: &Path, records: &[UserRecord]) -> Result<()> {
    write_jsonl(path, records)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub unassigned: usize,
}

pub fn split_counts(records: &[UserRecord]) -> SplitCounts {
    let mut c = SplitCounts::default();
    for r in records {
        match r.split {
            Some(Split::Train) => c.train += 1,
            Some(Split::Validation) => c.validation += 1,
            Some(Split::Test) => c.test += 1,
            None => c.unassigned += 1,
        }
    }
    c
}

/// Shuffle users with `seed` and cut them into train/validation/test.
///
/// Sizes use largest-remainder rounding, so they always sum to the number of
/// users; every partition with a positive ratio receives at least one user.
pub fn split_dataset(records: &[UserRecord], ratios: (f64, f64, f64), seed: u64) -> Result<Vec<UserRecord>> {
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|x| !(*x > 0.0)) || ((r[0] + r[1] + r[2]) - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!("split ratios {ratios:?} must be positive and sum to 1")));
    }
    let n = records.len();
    if n < 3 {
        return Err(Error::Invalid(format!("cannot split {n} users into 3 partitions")));
    }
    let sizes = largest_remainder(n, &r);

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut out = records.to_vec();
    for (pos, &idx) in order.iter().enumerate() {
        let split = if pos < sizes[0] {
            Split::Train
        } else if pos < sizes[0] + sizes[1] {
            Split::Validation
        } else {
            Split::Test
        };
        out[idx].split = Some(split);
    }
    Ok(out)
}

fn largest_remainder(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes = [0usize; 3];
    for i in 0..3 {
        sizes[i] = exact[i].floor() as usize;
    }
    let mut rest = n - sizes.iter().sum::<usize>();
    let mut by_remainder: Vec<usize> = (0..3).collect();
    by_remainder.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in by_remainder.iter().cycle() {
        if rest == 0 {
            break;
        }
        sizes[i] += 1;
        rest -= 1;
    }
    // borrow from the largest partition so nothing is empty
    for i in 0..3 {
        if sizes[i] == 0 {
            let big = (0..3).max_by_key(|&j| sizes[j]).unwrap();
            sizes[big] -= 1;
            sizes[i] = 1;
        }
    }
    sizes
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: String,
    pub text: String,
    pub construct: Dimension,
    pub scale_min: i32,
    pub scale_max: i32,
}

impl Item {
    pub fn midpoint(&self) -> f64 {
        0.5 * (self.scale_min as f64 + self.scale_max as f64)
    }

    pub fn half_range(&self) -> f64 {
        0.5 * (self.scale_max - self.scale_min) as f64
    }

    /// Map a raw answer onto [0, 1].
    pub fn normalize(&self, answer: f64) -> f64 {
        (answer - self.scale_min as f64) / (self.scale_max - self.scale_min) as f64
    }

    pub fn clamp(&self, answer: f64) -> f64 {
        answer.clamp(self.scale_min as f64, self.scale_max as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Questionnaire {
    pub version: String,
    pub items: Vec<Item>,
}

pub const DEFAULT_SCALE: (i32, i32) = (1, 7);

#[derive(Serialize, Deserialize)]
struct RawScale {
    min: i32,
    max: i32,
}

#[derive(Serialize, Deserialize)]
struct RawItem {
    id: String,
    text: String,
    construct: String,
}

#[derive(Serialize, Deserialize)]
struct RawQuestionnaire {
    version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scale: Option<RawScale>,
    items: Vec<RawItem>,
}

impl Questionnaire {
    /// Validate structure: unique ids, a sane scale, and at least one item per dimension.
    pub fn new(version: impl Into<String>, items: Vec<Item>) -> Result<Questionnaire> {
        let mut ids = HashSet::new();
        for item in &items {
            if !ids.insert(item.item_id.as_str()) {
                return Err(Error::Structure(format!("duplicate item id `{}`", item.item_id)));
            }
            if item.scale_max - item.scale_min < 2 {
                return Err(Error::Structure(format!(
                    "item `{}` scale [{}, {}] needs at least three points",
                    item.item_id, item.scale_min, item.scale_max
                )));
            }
        }
        for dim in Dimension::ALL {
            if !items.iter().any(|i| i.construct == dim) {
                return Err(Error::Structure(format!("dimension {dim} has no items")));
            }
        }
        Ok(Questionnaire {
            version: version.into(),
            items,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn position(&self, item_id: &str) -> Option<usize> {
        self.items.iter().position(|i| i.item_id == item_id)
    }

    pub fn items_of(&self, dim: Dimension) -> impl Iterator<Item = (usize, &Item)> {
        self.items.iter().enumerate().filter(move |(_, i)| i.construct == dim)
    }

    /// Keep only the items at `positions`, in the given order.
    pub fn subset(&self, positions: &[usize]) -> Result<Questionnaire> {
        let items = positions.iter().map(|&p| self.items[p].clone()).collect();
        Questionnaire::new(format!("{}+subset{}", self.version, positions.len()), items)
    }

    pub fn from_json(text: &str) -> Result<Questionnaire> {
        let raw: RawQuestionnaire = serde_json::from_str(text)?;
        let (lo, hi) = raw.scale.map(|s| (s.min, s.max)).unwrap_or(DEFAULT_SCALE);
        let mut items = Vec::with_capacity(raw.items.len());
        for it in raw.items {
            items.push(Item {
                construct: it.construct.parse()?,
                item_id: it.id,
                text: it.text,
                scale_min: lo,
                scale_max: hi,
            });
        }
        Questionnaire::new(raw.version, items)
    }

    pub fn to_json(&self) -> Result<String> {
        let scale = self.items.first().map(|i| RawScale {
            min: i.scale_min,
            max: i.scale_max,
        });
        if self
            .items
            .iter()
            .any(|i| (i.scale_min, i.scale_max) != (self.items[0].scale_min, self.items[0].scale_max))
        {
            return Err(Error::Structure("mixed item scales cannot be written to one file".into()));
        }
        let raw = RawQuestionnaire {
            version: self.version.clone(),
            scale,
            items: self
                .items
                .iter()
                .map(|i| RawItem {
                    id: i.item_id.clone(),
                    text: i.text.clone(),
                    construct: i.construct.name().to_string(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&raw)?)
    }
}

pub fn load_questionnaire(path: &Path) -> Result<Questionnaire> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Questionnaire::from_json(&text)
}

pub fn write_questionnaire(path: &Path, q: &Questionnaire) -> Result<()> {
    let mut text = q.to_json()?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// The `T` sampled answers for one (user, item) pair, with their mean and
/// population variance.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnswerRecord {
    pub user_id: String,
    pub item_id: String,
    pub samples: Vec<f64>,
    #[serde(skip)]
    pub mean: f64,
    #[serde(skip)]
    pub variance: f64,
}

impl AnswerRecord {
    pub fn new(user_id: impl Into<String>, item_id: impl Into<String>, samples: Vec<f64>) -> Result<AnswerRecord> {
        if samples.is_empty() {
            return Err(Error::Invalid("answer record needs at least one sample".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("answer samples".into()));
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let variance = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
        Ok(AnswerRecord {
            user_id: user_id.into(),
            item_id: item_id.into(),
            samples,
            mean,
            variance,
        })
    }
}

#[derive(Deserialize)]
struct RawAnswer {
    user_id: String,
    item_id: String,
    samples: Vec<f64>,
}

pub fn load_answers(path: &Path) -> Result<Vec<AnswerRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawAnswer = serde_json::from_str(&line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        let rec = AnswerRecord::new(raw.user_id, raw.item_id, raw.samples)
            .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_answers(path: &Path, records: &[AnswerRecord]) -> Result<()> {
    write_jsonl(path, records)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
