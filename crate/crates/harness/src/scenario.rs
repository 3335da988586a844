//! Synthetic grid scenes. Each cell is empty or holds one object class; the
//! set of placed classes is the scene's ground-truth pool.

use std::collections::{BTreeMap, BTreeSet};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sid_core::metrics::{ObjectPool, PoolSet};
use sid_core::numeric::Matrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("grid must be at least 1x1, got {rows}x{cols}")]
    EmptyGrid { rows: usize, cols: usize },
    #[error("class universe of {0} is below the minimum of 4")]
    TooFewClasses(usize),
    #[error("up to {objects} objects cannot fit in {cells} cells")]
    Overfull { objects: usize, cells: usize },
    #[error("object count range {min}..={max} is empty")]
    BadObjectRange { min: usize, max: usize },
    #[error("class weights: {0}")]
    BadWeights(String),
}

const NAMES: [&str; 16] = [
    "person", "dog", "cat", "car", "bicycle", "bus", "chair", "table", "cup", "fork", "knife", "bottle", "bench",
    "kite", "boat", "clock",
];

/// Display name of class `c`.
pub fn class_name(c: usize) -> String {
    NAMES.get(c).map(|s| s.to_string()).unwrap_or_else(|| format!("class{c}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSpec {
    pub rows: usize,
    pub cols: usize,
    pub n_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Relative class frequencies. Empty means `1 / (c + 1)`.
    #[serde(default)]
    pub class_weights: Vec<f64>,
    /// Strongly co-occurring partners drawn per class.
    pub partners: usize,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            rows: 4,
            cols: 4,
            n_classes: 12,
            min_objects: 2,
            max_objects: 6,
            class_weights: Vec::new(),
            partners: 2,
        }
    }
}

impl ScenarioSpec {
    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Class weights normalized to frequencies.
    pub fn frequencies(&self) -> Vec<f64> {
        let w: Vec<f64> = if self.class_weights.is_empty() {
            (0..self.n_classes).map(|c| 1.0 / (c + 1) as f64).collect()
        } else {
            self.class_weights.clone()
        };
        let total: f64 = w.iter().sum();
        w.iter().map(|v| v / total).collect()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.rows == 0 || self.cols == 0 {
            return Err(ScenarioError::EmptyGrid {
                rows: self.rows,
                cols: self.cols,
            });
        }
        if self.n_classes < 4 {
            return Err(ScenarioError::TooFewClasses(self.n_classes));
        }
        if self.min_objects > self.max_objects {
            return Err(ScenarioError::BadObjectRange {
                min: self.min_objects,
                max: self.max_objects,
            });
        }
        if self.max_objects > self.cells() {
            return Err(ScenarioError::Overfull {
                objects: self.max_objects,
                cells: self.cells(),
            });
        }
        if !self.class_weights.is_empty() {
            if self.class_weights.len() != self.n_classes {
                return Err(ScenarioError::BadWeights(format!(
                    "{} weights for {} classes",
                    self.class_weights.len(),
                    self.n_classes
                )));
            }
            if self.class_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
                || self.class_weights.iter().sum::<f64>() <= 0.0
            {
                return Err(ScenarioError::BadWeights("weights must be finite, >= 0, not all 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub image_id: String,
    pub rows: usize,
    pub cols: usize,
    /// Row-major, one entry per cell.
    pub cells: Vec<Option<usize>>,
}

impl Scenario {
    pub fn classes(&self) -> BTreeSet<usize> {
        self.cells.iter().flatten().copied().collect()
    }

    pub fn cells_of(&self, class: usize) -> Vec<usize> {
        (0..self.cells.len()).filter(|&j| self.cells[j] == Some(class)).collect()
    }

    pub fn pool(&self) -> ObjectPool {
        ObjectPool {
            image_id: self.image_id.clone(),
            objects: self.classes().into_iter().map(class_name).collect(),
        }
    }

    /// Raw per-cell features: `[class one-hot | occupied | 1 | cell one-hot]`.
    pub fn vision_features(&self, n_classes: usize) -> Matrix {
        let n = self.cells.len();
        let width = n_classes + 2 + n;
        let mut m = Matrix::zeros(n, width);
        for (j, cell) in self.cells.iter().enumerate() {
            if let Some(c) = *cell {
                m.set(j, c, 1.0);
                m.set(j, n_classes, 1.0);
            }
            m.set(j, n_classes + 1, 1.0);
            m.set(j, n_classes + 2 + j, 1.0);
        }
        m
    }
}

/// A generated batch plus the priors it was drawn under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSet {
    pub spec: ScenarioSpec,
    pub seed: u64,
    /// Symmetric, zero diagonal, entries in `[0, 1]`.
    pub cooccurrence: Vec<Vec<f64>>,
    pub scenarios: Vec<Scenario>,
}

impl ScenarioSet {
    pub fn pool_set(&self) -> PoolSet {
        let c = self.spec.n_classes;
        let universe: Vec<String> = (0..c).map(class_name).collect();
        let mut cooccurrence = BTreeMap::new();
        for a in 0..c {
            let row = (0..c)
                .filter(|&b| b != a)
                .map(|b| (class_name(b), self.cooccurrence[a][b]))
                .collect();
            cooccurrence.insert(class_name(a), row);
        }
        let popularity = self
            .spec
            .frequencies()
            .into_iter()
            .enumerate()
            .map(|(k, f)| (class_name(k), f))
            .collect();
        PoolSet {
            universe,
            pools: self.scenarios.iter().map(Scenario::pool).collect(),
            cooccurrence,
            popularity,
            synonyms: BTreeMap::new(),
        }
    }
}

// Weights are multiples of 1/64 so that downstream bias sums stay exact.
fn quantize(x: f64) -> f64 {
    (x * 64.0).round() / 64.0
}

fn sample_cooccurrence(spec: &ScenarioSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let c = spec.n_classes;
    let mut w = vec![vec![0.0; c]; c];
    for a in 0..c {
        for b in a + 1..c {
            let v = quantize(rng.random_range(0.0..0.3));
            w[a][b] = v;
            w[b][a] = v;
        }
    }
    for a in 0..c {
        let others: Vec<usize> = (0..c).filter(|&b| b != a).collect();
        let k = spec.partners.min(others.len());
        for j in index::sample(rng, others.len(), k) {
            let b = others[j];
            let v = quantize(rng.random_range(0.7..=1.0));
            w[a][b] = v;
            w[b][a] = v;
        }
    }
    w
}

/// `count` scenes from `seed`. The co-occurrence table comes from stream 0 and
/// scene `k` from stream `k + 1`, so scene contents do not depend on `count`.
pub fn gen_scenarios(spec: &ScenarioSpec, seed: u64, count: usize) -> Result<ScenarioSet, ScenarioError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cooccurrence = sample_cooccurrence(spec, &mut rng);
    let dist = WeightedIndex::new(spec.frequencies()).map_err(|e| ScenarioError::BadWeights(e.to_string()))?;
    let n = spec.cells();
    let scenarios = (0..count)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64 + 1);
            let objects = rng.random_range(spec.min_objects..=spec.max_objects);
            let mut cells = vec![None; n];
            for j in index::sample(&mut rng, n, objects) {
                cells[j] = Some(dist.sample(&mut rng));
            }
            Scenario {
                image_id: format!("scene{k:04}"),
                rows: spec.rows,
                cols: spec.cols,
                cells,
            }
        })
        .collect();
    Ok(ScenarioSet {
        spec: spec.clone(),
        seed,
        cooccurrence,
        scenarios,
    })
}
