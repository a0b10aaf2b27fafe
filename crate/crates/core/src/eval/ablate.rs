//! Train-and-evaluate grids over connectors, aggregator, buffer policy and capacity.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{evaluate_routes, EvalOptions, GatePolicy, Suite};
use crate::buffer::EvictionPolicy;
use crate::error::Result;
use crate::model::ConnectorMode;
use crate::sim::Difficulty;
use crate::trainer::{build_dataset, train, Dataset, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QFormerVariant {
    /// Stateless: every query is a local query.
    Vanilla,
    /// Local plus carried memory queries.
    Ls,
}

impl QFormerVariant {
    pub fn name(self) -> &'static str {
        match self {
            QFormerVariant::Vanilla => "vanilla",
            QFormerVariant::Ls => "ls",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub connectors: ConnectorMode,
    pub qformer: QFormerVariant,
    pub buffer_policy: EvictionPolicy,
    pub capacity: usize,
}

impl AblationCell {
    /// The training configuration of this cell. Both aggregator variants
    /// emit the same number of tokens.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        let n = c.model.n_tokens();
        match self.qformer {
            QFormerVariant::Vanilla => {
                c.model.n_local = n;
                c.model.n_memory = 0;
            }
            QFormerVariant::Ls if c.model.n_memory == 0 => {
                c.model.n_local = n.div_ceil(2);
                c.model.n_memory = n - c.model.n_local;
            }
            QFormerVariant::Ls => {}
        }
        c.model.connectors = self.connectors;
        c.model.buffer_policy = self.buffer_policy;
        c.model.buffer_capacity = self.capacity;
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub connectors: Vec<ConnectorMode>,
    pub qformers: Vec<QFormerVariant>,
    pub policies: Vec<EvictionPolicy>,
    pub capacities: Vec<usize>,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub suite: Suite,
}

impl AblationSpec {
    /// The full 3 x 2 x 3 x 3 grid.
    pub fn full(train: TrainConfig, suite: Suite, seeds: Vec<u64>) -> Self {
        Self {
            connectors: ConnectorMode::ALL.to_vec(),
            qformers: vec![QFormerVariant::Vanilla, QFormerVariant::Ls],
            policies: EvictionPolicy::ALL.to_vec(),
            capacities: vec![5, 10, 20],
            seeds,
            train,
            suite,
        }
    }

    pub fn cells(&self) -> Vec<AblationCell> {
        let mut cells = Vec::new();
        for &connectors in &self.connectors {
            for &qformer in &self.qformers {
                for &buffer_policy in &self.policies {
                    for &capacity in &self.capacities {
                        cells.push(AblationCell {
                            connectors,
                            qformer,
                            buffer_policy,
                            capacity,
                        });
                    }
                }
            }
        }
        cells
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub connectors: String,
    pub qformer: String,
    pub buffer_policy: String,
    pub capacity: usize,
    pub seed: u64,
    pub ds: f64,
    pub ds_easy: f64,
    pub ds_hard: f64,
    pub rc: f64,
    pub is_score: f64,
    pub activation_rate: f64,
}

/// Train and evaluate every cell for every seed. `on_row` sees each row as it lands.
pub fn ablate(spec: &AblationSpec, mut on_row: impl FnMut(&AblationRow)) -> Result<Vec<AblationRow>> {
    let routes = spec.suite.build();
    let mut datasets: BTreeMap<u64, Dataset> = BTreeMap::new();
    let mut rows = Vec::new();
    for &seed in &spec.seeds {
        for cell in spec.cells() {
            let mut config = cell.apply(&spec.train);
            config.seed = seed;
            if let std::collections::btree_map::Entry::Vacant(e) = datasets.entry(seed) {
                e.insert(build_dataset(&config)?);
            }
            let trained = train(&config, &datasets[&seed])?;
            let report = evaluate_routes(
                &trained.model,
                &trained.store,
                &spec.suite.name,
                &routes,
                spec.suite.max_steps,
                GatePolicy::Adaptive,
                EvalOptions::default(),
            )?;
            let row = AblationRow {
                connectors: cell.connectors.name().into(),
                qformer: cell.qformer.name().into(),
                buffer_policy: cell.buffer_policy.name().into(),
                capacity: cell.capacity,
                seed,
                ds: report.mean_ds,
                ds_easy: report.ds(Some(Difficulty::Easy)),
                ds_hard: report.ds(Some(Difficulty::Hard)),
                rc: report.mean_rc,
                is_score: report.mean_is,
                activation_rate: report.activation_rate,
            };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}
