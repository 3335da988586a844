//! Object hallucination metrics over symbolic captions and yes/no probes.
//!
//! CHAIR counts caption mentions that are not in the image's ground-truth
//! object set. POPE asks balanced existence questions whose negatives are
//! drawn at random, from popular objects, or from objects that co-occur with
//! what is present. Text statistics report words and sentences per caption
//! and the distinct-n ratio.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no object pool for image {0}")]
    MissingPool(String),
    #[error("image {0} has no absent objects to draw negatives from")]
    InsufficientAbsent(String),
    #[error("image {0} has no present objects to ask about")]
    NoPresentObjects(String),
    #[error("no pools given")]
    EmptyPools,
    #[error("no records given")]
    EmptyRecords,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}:{line}: {source}")]
    Parse {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Sentence terminators, either as standalone tokens or as a token's last
/// character.
pub const TERMINATORS: [char; 3] = ['.', '!', '?'];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: String,
    pub caption: Vec<String>,
    /// Distinct object words of `caption`, in first-mention order.
    pub mentioned_objects: Vec<String>,
}

impl CaptionRecord {
    /// Extracts mentions as the caption tokens that belong to `objects`.
    pub fn from_caption(image_id: impl Into<String>, caption: Vec<String>, objects: &BTreeSet<String>) -> Self {
        let mut seen = HashSet::new();
        let mentioned_objects = caption
            .iter()
            .map(|t| t.trim_end_matches(TERMINATORS))
            .filter(|t| objects.contains(*t) && seen.insert(t.to_string()))
            .map(str::to_string)
            .collect();
        Self {
            image_id: image_id.into(),
            caption,
            mentioned_objects,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectPool {
    pub image_id: String,
    pub objects: BTreeSet<String>,
}

/// Ground truth for a set of images plus the corpus-level statistics the
/// POPE negative samplers need.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PoolSet {
    /// Every object name that can be asked about.
    pub universe: Vec<String>,
    pub pools: Vec<ObjectPool>,
    /// `object -> {other -> weight}`, weights >= 0.
    #[serde(default)]
    pub cooccurrence: BTreeMap<String, BTreeMap<String, f64>>,
    /// Higher is more popular. Missing objects count as 0.
    #[serde(default)]
    pub popularity: BTreeMap<String, f64>,
    /// Alias -> canonical name, applied to mentions and pools alike.
    #[serde(default)]
    pub synonyms: BTreeMap<String, String>,
}

impl PoolSet {
    pub fn normalize<'a>(&'a self, name: &'a str) -> &'a str {
        self.synonyms.get(name).map(String::as_str).unwrap_or(name)
    }

    pub fn pool(&self, image_id: &str) -> Option<&ObjectPool> {
        self.pools.iter().find(|p| p.image_id == image_id)
    }

    fn normalized_pool(&self, image_id: &str) -> Result<BTreeSet<&str>, MetricsError> {
        let pool = self
            .pool(image_id)
            .ok_or_else(|| MetricsError::MissingPool(image_id.to_string()))?;
        Ok(pool.objects.iter().map(|o| self.normalize(o)).collect())
    }

    /// Popularity counted as the number of images each object appears in.
    pub fn empirical_popularity(&self) -> BTreeMap<String, f64> {
        let mut out: BTreeMap<String, f64> = self.universe.iter().map(|o| (o.clone(), 0.0)).collect();
        for p in &self.pools {
            for o in &p.objects {
                *out.entry(o.clone()).or_default() += 1.0;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChairScore {
    pub c_s: f64,
    pub c_i: f64,
    pub captions: usize,
    pub hallucinated_captions: usize,
    pub mentions: usize,
    pub hallucinated_mentions: usize,
}

/// Corpus-level CHAIR. A caption with no mentions adds to the caption count
/// only; with no mentions anywhere `c_i` is 0.
pub fn chair(records: &[CaptionRecord], pools: &PoolSet) -> Result<ChairScore, MetricsError> {
    let mut mentions = 0;
    let mut hallucinated_mentions = 0;
    let mut hallucinated_captions = 0;
    for r in records {
        let pool = pools.normalized_pool(&r.image_id)?;
        let distinct: BTreeSet<&str> = r.mentioned_objects.iter().map(|o| pools.normalize(o)).collect();
        let bad = distinct.iter().filter(|o| !pool.contains(*o)).count();
        mentions += distinct.len();
        hallucinated_mentions += bad;
        if bad > 0 {
            hallucinated_captions += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(ChairScore {
        c_s: ratio(hallucinated_captions, records.len()),
        c_i: ratio(hallucinated_mentions, mentions),
        captions: records.len(),
        hallucinated_captions,
        mentions,
        hallucinated_mentions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopeSetting {
    Random,
    Popular,
    Adversarial,
}

impl PopeSetting {
    pub const ALL: [PopeSetting; 3] = [PopeSetting::Random, PopeSetting::Popular, PopeSetting::Adversarial];

    pub fn name(self) -> &'static str {
        match self {
            PopeSetting::Random => "random",
            PopeSetting::Popular => "popular",
            PopeSetting::Adversarial => "adversarial",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Answer {
    Yes,
    No,
    Abstain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopeItem {
    pub image_id: String,
    pub object: String,
    /// `true` when the object is present.
    pub label: bool,
    /// Unanswered items score as abstentions.
    #[serde(default)]
    pub answer: Option<Answer>,
    pub setting: PopeSetting,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PopeScore {
    pub items: usize,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub abstain: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Fraction of items answered "yes".
    pub yes_ratio: f64,
}

impl PopeScore {
    fn from_items<'a>(items: impl Iterator<Item = &'a PopeItem>) -> Self {
        let mut s = PopeScore::default();
        for it in items {
            s.items += 1;
            match (it.answer.unwrap_or(Answer::Abstain), it.label) {
                (Answer::Yes, true) => s.tp += 1,
                (Answer::Yes, false) => s.fp += 1,
                (Answer::No, false) => s.tn += 1,
                (Answer::No, true) => s.fn_ += 1,
                // An abstention is wrong, and a missed positive when the
                // object is there.
                (Answer::Abstain, true) => {
                    s.abstain += 1;
                    s.fn_ += 1
                }
                (Answer::Abstain, false) => s.abstain += 1,
            }
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        s.accuracy = ratio(s.tp + s.tn, s.items);
        s.precision = ratio(s.tp, s.tp + s.fp);
        s.recall = ratio(s.tp, s.tp + s.fn_);
        // 2PR / (P + R) written over counts: one rounding, and 0 when P = R = 0.
        s.f1 = ratio(2 * s.tp, 2 * s.tp + s.fp + s.fn_);
        s.yes_ratio = ratio(s.tp + s.fp, s.items);
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopeReport {
    pub overall: PopeScore,
    pub per_setting: BTreeMap<PopeSetting, PopeScore>,
}

pub fn pope_score(items: &[PopeItem]) -> Result<PopeReport, MetricsError> {
    if items.is_empty() {
        return Err(MetricsError::EmptyRecords);
    }
    let per_setting = PopeSetting::ALL
        .iter()
        .filter(|&&s| items.iter().any(|i| i.setting == s))
        .map(|&s| (s, PopeScore::from_items(items.iter().filter(|i| i.setting == s))))
        .collect();
    Ok(PopeReport {
        overall: PopeScore::from_items(items.iter()),
        per_setting,
    })
}

/// Balanced existence questions, one (present, absent) pair at a time,
/// cycling through the pools. Within an image, positives and negatives are
/// used without replacement until exhausted, then reused in the same order.
///
/// Negatives: `Random` shuffles the absent objects, `Popular` ranks them by
/// popularity, `Adversarial` by summed co-occurrence weight with the present
/// objects. Ties fall back to universe order. An odd `count` ends on a
/// positive.
pub fn make_pope_items(
    pools: &PoolSet,
    setting: PopeSetting,
    count: usize,
    seed: u64,
) -> Result<Vec<PopeItem>, MetricsError> {
    if pools.pools.is_empty() {
        return Err(MetricsError::EmptyPools);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let universe: Vec<&str> = {
        let mut seen = HashSet::new();
        pools
            .universe
            .iter()
            .map(|o| pools.normalize(o))
            .filter(|o| seen.insert(*o))
            .collect()
    };
    let popularity = if pools.popularity.is_empty() {
        pools.empirical_popularity()
    } else {
        pools.popularity.clone()
    };
    let pop = |o: &str| popularity.get(o).copied().unwrap_or(0.0);

    struct Queue<'a> {
        positives: Vec<&'a str>,
        negatives: Vec<&'a str>,
        used_pos: usize,
        used_neg: usize,
    }
    let mut queues: Vec<Option<Queue>> = (0..pools.pools.len()).map(|_| None).collect();
    let mut items = Vec::with_capacity(count);
    let mut j = 0;
    while items.len() < count {
        let slot = j % pools.pools.len();
        j += 1;
        let image_id = &pools.pools[slot].image_id;
        if queues[slot].is_none() {
            let present = pools.normalized_pool(image_id)?;
            let mut positives: Vec<&str> = present.iter().copied().collect();
            if positives.is_empty() {
                return Err(MetricsError::NoPresentObjects(image_id.clone()));
            }
            positives.shuffle(&mut rng);
            let mut negatives: Vec<&str> = universe.iter().copied().filter(|o| !present.contains(o)).collect();
            if negatives.is_empty() {
                return Err(MetricsError::InsufficientAbsent(image_id.clone()));
            }
            match setting {
                PopeSetting::Random => negatives.shuffle(&mut rng),
                PopeSetting::Popular => negatives.sort_by(|a, b| pop(b).total_cmp(&pop(a))),
                PopeSetting::Adversarial => {
                    let weight = |o: &str| -> f64 {
                        present
                            .iter()
                            .filter_map(|p| pools.cooccurrence.get(*p).and_then(|row| row.get(o)))
                            .sum()
                    };
                    negatives.sort_by(|a, b| weight(b).total_cmp(&weight(a)));
                }
            }
            queues[slot] = Some(Queue {
                positives,
                negatives,
                used_pos: 0,
                used_neg: 0,
            });
        }
        let q = queues[slot].as_mut().expect("filled above");
        let obj = q.positives[q.used_pos % q.positives.len()];
        q.used_pos += 1;
        items.push(PopeItem {
            image_id: image_id.clone(),
            object: obj.to_string(),
            label: true,
            answer: None,
            setting,
        });
        if items.len() == count {
            break;
        }
        let obj = q.negatives[q.used_neg % q.negatives.len()];
        q.used_neg += 1;
        items.push(PopeItem {
            image_id: image_id.clone(),
            object: obj.to_string(),
            label: false,
            answer: None,
            setting,
        });
    }
    Ok(items)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextStats {
    /// Mean words per caption.
    pub wpi: f64,
    /// Mean sentences per caption.
    pub spi: f64,
    pub distinct_1: f64,
    pub distinct_2: f64,
}

fn is_terminator_token(t: &str) -> bool {
    !t.is_empty() && t.chars().all(|c| TERMINATORS.contains(&c))
}

fn words(caption: &[String]) -> Vec<&str> {
    caption
        .iter()
        .filter(|t| !is_terminator_token(t))
        .map(|t| t.trim_end_matches(TERMINATORS))
        .collect()
}

/// Sentences end at a terminator (standalone or trailing a word); trailing
/// words without one form a final sentence.
fn sentences(caption: &[String]) -> usize {
    let mut count = 0;
    let mut open = false;
    for t in caption {
        if !is_terminator_token(t) {
            open = true;
        }
        if t.ends_with(TERMINATORS) && open {
            count += 1;
            open = false;
        }
    }
    count + usize::from(open)
}

/// Words exclude standalone terminators. Distinct-n is unique n-grams over
/// total n-grams across the corpus, n-grams never spanning captions.
pub fn text_stats(records: &[CaptionRecord]) -> Result<TextStats, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyRecords);
    }
    let mut n_words = 0usize;
    let mut n_sent = 0usize;
    let mut uni = HashSet::new();
    let mut bi = HashSet::new();
    let mut n_bi = 0usize;
    for r in records {
        let w = words(&r.caption);
        n_words += w.len();
        n_sent += sentences(&r.caption);
        uni.extend(w.iter().copied());
        for pair in w.windows(2) {
            bi.insert((pair[0], pair[1]));
            n_bi += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let n = records.len() as f64;
    Ok(TextStats {
        wpi: n_words as f64 / n,
        spi: n_sent as f64 / n,
        distinct_1: ratio(uni.len(), n_words),
        distinct_2: ratio(bi.len(), n_bi),
    })
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, MetricsError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| MetricsError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), MetricsError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, MetricsError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|source| MetricsError::Parse {
        path: path.display().to_string(),
        line: 0,
        source,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), MetricsError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}
