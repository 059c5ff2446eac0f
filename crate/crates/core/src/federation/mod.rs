//! Round orchestration: client selection, local updates under each
//! strategy, server aggregation and the stage schedule.

mod client;
mod server;

pub use client::{local_update, ClientState, RoundReport};
pub use server::{aggregate, ServerState};

use rand::seq::index;
use rayon::prelude::*;

use crate::data::{LabeledDataset, TaskStream};
use crate::error::{invalid, Result};
use crate::metrics::{evaluate_round, ClientView, MetricsLog, RoundRecord};
use crate::model::{Hyperparams, ModelParams, ModelShape, Objective, ProtoMetric, ReferenceMode};
use crate::prototypes::PrototypeWeighting;
use crate::rng::{rng_for, stream as tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    FedAvg,
    FedProx,
    FedProto,
    FedMlp,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum AggregationScope {
    #[default]
    Full,
    /// Clients pull only the feature extractor; the server's classifier is
    /// the reporters' average and is used for global evaluation only.
    ExtractorOnly,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Schedule {
    /// Stage `t` owns rounds `(t-1)*epochs .. t*epochs`.
    #[default]
    Sequential,
    /// Every epoch runs one round per stage, in stage order.
    Interleaved,
}

impl Schedule {
    /// 1-based stage of 0-based round `round`.
    pub fn stage(self, round: usize, epochs: usize, tasks: usize) -> usize {
        match self {
            Schedule::Sequential => round / epochs + 1,
            Schedule::Interleaved => round % tasks + 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    pub fedprox_mu: f64,
    pub loss_prototype: bool,
    pub loss_intertask: bool,
    pub loss_semantic: bool,
    pub scope: AggregationScope,
    pub reference_mode: ReferenceMode,
    pub prototype_weighting: PrototypeWeighting,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::FedMlp,
            fedprox_mu: 0.01,
            loss_prototype: true,
            loss_intertask: true,
            loss_semantic: true,
            scope: AggregationScope::Full,
            reference_mode: ReferenceMode::PerSample,
            prototype_weighting: PrototypeWeighting::Unweighted,
        }
    }
}

impl StrategyConfig {
    pub fn objective(&self) -> Objective {
        match self.strategy {
            Strategy::FedAvg | Strategy::FedProx => Objective::cross_entropy_only(),
            Strategy::FedProto => Objective {
                prototype: true,
                metric: ProtoMetric::SquaredL2,
                ..Default::default()
            },
            Strategy::FedMlp => Objective {
                prototype: self.loss_prototype,
                intertask: self.loss_intertask,
                semantic: self.loss_semantic,
                metric: ProtoMetric::SmoothL1,
            },
        }
    }

    /// Whether clients send prototypes to the server.
    pub fn uploads_prototypes(&self) -> bool {
        let o = self.objective();
        o.prototype || o.semantic
    }

    pub fn extractor_only(&self) -> bool {
        self.scope == AggregationScope::ExtractorOnly
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    pub strategy: StrategyConfig,
    pub hyper: Hyperparams,
    /// Global communication epochs; the run has `epochs * T` rounds.
    pub epochs: usize,
    /// Local epochs over the task per round.
    pub rounds_local: usize,
    pub m_active: usize,
    /// Local semantic prototype count (`None`: derived from class count).
    pub local_clusters: Option<usize>,
    /// Global semantic prototype count (`None`: derived from class count).
    pub global_clusters: Option<usize>,
    pub schedule: Schedule,
    pub hidden: usize,
    pub feature_dim: usize,
    /// Worker threads for client updates; 0 uses all cores. Results do not
    /// depend on it.
    pub threads: usize,
    pub seed: u64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            strategy: StrategyConfig::default(),
            hyper: Hyperparams::default(),
            epochs: 50,
            rounds_local: 20,
            m_active: 10,
            local_clusters: None,
            global_clusters: None,
            schedule: Schedule::Sequential,
            hidden: 64,
            feature_dim: 32,
            threads: 0,
            seed: 0,
        }
    }
}

/// Uniform sample of `m_active` client ids without replacement, sorted.
pub fn select_clients(num_clients: usize, m_active: usize, seed: u64, round: usize) -> Result<Vec<usize>> {
    if m_active == 0 {
        return Err(invalid("m_active must be at least 1"));
    }
    if m_active > num_clients {
        return Err(invalid(format!("cannot select {m_active} of {num_clients} clients")));
    }
    let mut rng = rng_for(seed, &[tag::SELECT, round as u64]);
    let mut ids = index::sample(&mut rng, num_clients, m_active).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// A full federated run over prepared task streams.
pub struct Simulation {
    pub cfg: FederationConfig,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub balanced_test: LabeledDataset,
    tasks: usize,
}

impl Simulation {
    pub fn new(streams: Vec<TaskStream>, balanced_test: LabeledDataset, cfg: FederationConfig) -> Result<Self> {
        let first = streams.first().ok_or_else(|| invalid("no clients"))?;
        let tasks = first.num_tasks();
        if tasks == 0 || streams.iter().any(|s| s.num_tasks() != tasks) {
            return Err(invalid("every client needs the same nonzero number of tasks"));
        }
        if cfg.epochs == 0 {
            return Err(invalid("epochs must be at least 1"));
        }
        let sample = first.tasks.iter().chain(&first.tests).next().expect("tasks > 0");
        let shape = ModelShape {
            d_in: sample.dim(),
            hidden: cfg.hidden,
            feature_dim: cfg.feature_dim,
            classes: sample.class_count(),
        };
        let init = ModelParams::init(shape, cfg.seed);
        let clients = streams.into_iter().map(|s| ClientState::new(s, init.clone())).collect();
        Ok(Self {
            server: ServerState::new(init),
            clients,
            balanced_test,
            tasks,
            cfg,
        })
    }

    pub fn total_rounds(&self) -> usize {
        self.cfg.epochs * self.tasks
    }

    pub fn stage_of(&self, round: usize) -> usize {
        self.cfg.schedule.stage(round, self.cfg.epochs, self.tasks)
    }

    /// Runs one communication round (0-based) and returns its record.
    pub fn step(&mut self, round: usize) -> Result<RoundRecord> {
        let stage = self.stage_of(round);
        let selected = select_clients(self.clients.len(), self.cfg.m_active, self.cfg.seed, round)?;
        let server = &self.server;
        let cfg = &self.cfg;
        let reports: Vec<RoundReport> = self
            .clients
            .par_iter_mut()
            .filter(|c| selected.binary_search(&c.client_id).is_ok())
            .map(|c| local_update(c, server, stage, round, cfg))
            .collect::<Result<_>>()?;
        aggregate(&mut self.server, &reports, &self.cfg)?;

        let views: Vec<ClientView<'_>> = self
            .clients
            .iter()
            .map(|c| ClientView {
                params: &c.params,
                cumulative_test: &c.stream.cumulative_tests[stage - 1],
            })
            .collect();
        let acc = evaluate_round(&self.server.params, &views, &self.balanced_test, &self.server.minority);

        let trained: Vec<_> = reports.iter().filter_map(|r| r.losses).collect();
        let loss_mean = |f: fn(&crate::model::LossBreakdown) -> f64| {
            (!trained.is_empty()).then(|| trained.iter().map(f).sum::<f64>() / trained.len() as f64)
        };
        let upload_bytes = reports
            .iter()
            .filter_map(|r| r.prototypes.as_ref())
            .map(|p| {
                p.prototypes
                    .values()
                    .map(|v| v.len() * std::mem::size_of::<f64>())
                    .sum::<usize>()
            })
            .sum();
        Ok(RoundRecord {
            round: round + 1,
            stage,
            a_sel: acc.a_sel,
            a_loc: acc.a_loc,
            a_glo: acc.a_glo,
            a_loc_minority: acc.a_loc_minority,
            a_glo_minority: acc.a_glo_minority,
            loss_c: loss_mean(|l| l.l_c),
            loss_p: loss_mean(|l| l.l_p),
            loss_i: loss_mean(|l| l.l_i),
            loss_s: loss_mean(|l| l.l_s),
            proto_upload_bytes: upload_bytes,
        })
    }

    pub fn run(&mut self) -> Result<MetricsLog> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.cfg.threads)
            .build()
            .map_err(|e| invalid(format!("thread pool: {e}")))?;
        pool.install(|| {
            let mut log = MetricsLog::default();
            for round in 0..self.total_rounds() {
                log.push(self.step(round)?);
            }
            Ok(log)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use crate::experiment::{build_simulation, run_experiment};
    use crate::model::{ModelParams, ModelShape};

    fn toy() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.synth.classes = 4;
        cfg.synth.d_in = 4;
        cfg.synth.per_class = 40;
        cfg.partition.clients = 4;
        cfg.partition.tasks = 2;
        cfg.partition.shards = 2;
        let fed = &mut cfg.federation;
        fed.m_active = 2;
        fed.epochs = 2;
        fed.rounds_local = 2;
        fed.hidden = 8;
        fed.feature_dim = 4;
        fed.seed = 5;
        cfg
    }

    #[test]
    fn selection_full_and_sorted() {
        assert_eq!(select_clients(5, 5, 1, 3).unwrap(), vec![0, 1, 2, 3, 4]);
        let s = select_clients(20, 10, 1, 3).unwrap();
        assert!(s.windows(2).all(|w| w[0] < w[1]) && s.len() == 10);
        assert!(select_clients(3, 4, 1, 0).is_err());
        assert!(select_clients(3, 0, 1, 0).is_err());
    }

    #[test]
    fn selection_frequency() {
        let mut hits = [0usize; 20];
        for r in 0..1000 {
            for c in select_clients(20, 10, 42, r).unwrap() {
                hits[c] += 1;
            }
        }
        assert!(hits.iter().all(|&h| (440..=560).contains(&h)), "{hits:?}");
    }

    #[test]
    fn schedules() {
        let seq: Vec<usize> = (0..6).map(|r| Schedule::Sequential.stage(r, 2, 3)).collect();
        assert_eq!(seq, [1, 1, 2, 2, 3, 3]);
        let inter: Vec<usize> = (0..6).map(|r| Schedule::Interleaved.stage(r, 2, 3)).collect();
        assert_eq!(inter, [1, 2, 3, 1, 2, 3]);
    }

    #[test]
    fn toy_run_record_count() {
        let mut cfg = toy();
        cfg.partition.clients = 2;
        cfg.federation.m_active = 2;
        let log = run_experiment(&cfg).unwrap();
        assert_eq!(log.records.len(), 4);
        let stages: Vec<usize> = log.records.iter().map(|r| r.stage).collect();
        assert_eq!(stages, [1, 1, 2, 2]);
        for r in &log.records {
            for a in [r.a_sel, r.a_loc, r.a_glo].into_iter().flatten() {
                assert!((0.0..=1.0).contains(&a));
            }
        }
    }

    #[test]
    fn total_rounds_is_epochs_times_tasks() {
        let mut cfg = toy();
        cfg.partition.tasks = 5;
        cfg.partition.clients = 2;
        cfg.synth.per_class = 100;
        cfg.partition.shards = 1;
        cfg.federation.epochs = 50;
        assert_eq!(build_simulation(&cfg).unwrap().total_rounds(), 250);
    }

    #[test]
    fn baselines_collapse_to_fedavg() {
        let mut avg = toy();
        avg.federation.strategy.strategy = Strategy::FedAvg;
        let reference = run_experiment(&avg).unwrap().to_csv();

        let mut off = toy();
        let st = &mut off.federation.strategy;
        st.loss_prototype = false;
        st.loss_intertask = false;
        st.loss_semantic = false;
        assert_eq!(run_experiment(&off).unwrap().to_csv(), reference);

        let mut prox = toy();
        prox.federation.strategy.strategy = Strategy::FedProx;
        prox.federation.strategy.fedprox_mu = 0.0;
        assert_eq!(run_experiment(&prox).unwrap().to_csv(), reference);

        prox.federation.strategy.fedprox_mu = 0.1;
        assert_ne!(run_experiment(&prox).unwrap().to_csv(), reference);
    }

    #[test]
    fn thread_count_does_not_matter() {
        let mut a = toy();
        a.federation.threads = 1;
        let mut b = toy();
        b.federation.threads = 4;
        assert_eq!(
            run_experiment(&a).unwrap().to_csv(),
            run_experiment(&b).unwrap().to_csv()
        );
    }

    #[test]
    fn fedmlp_uploads_and_uses_regularizers() {
        let log = run_experiment(&toy()).unwrap();
        assert!(log.records.iter().all(|r| r.proto_upload_bytes > 0));
        assert!(log.records.iter().any(|r| r.loss_p.unwrap_or(0.0) > 0.0));
        let stage2: Vec<_> = log.records.iter().filter(|r| r.stage == 2).collect();
        assert!(stage2.iter().any(|r| r.loss_i.unwrap_or(0.0) > 0.0));
        let stage1_li: f64 = log
            .records
            .iter()
            .filter(|r| r.stage == 1)
            .filter_map(|r| r.loss_i)
            .sum();
        assert_eq!(stage1_li, 0.0);
    }

    fn report(client: usize, params: ModelParams, n: usize) -> RoundReport {
        RoundReport {
            client_id: client,
            stage: 1,
            params,
            prototypes: None,
            class_counts: [(0, n)].into(),
            samples_total: n,
            losses: None,
        }
    }

    fn shape() -> ModelShape {
        ModelShape {
            d_in: 3,
            hidden: 4,
            feature_dim: 2,
            classes: 3,
        }
    }

    fn filled(v: f64) -> ModelParams {
        let mut p = ModelParams::zeros(shape());
        let n = p.num_params();
        p.set_flat(&vec![v; n]);
        p
    }

    #[test]
    fn aggregation_weights_by_samples() {
        let cfg = FederationConfig::default();
        let mut server = ServerState::new(filled(9.0));
        aggregate(
            &mut server,
            &[report(0, filled(0.0), 1), report(1, filled(4.0), 3)],
            &cfg,
        )
        .unwrap();
        assert!(server.params.flatten().iter().all(|&x| x == 3.0));
        assert_eq!(server.class_counts[&0], 4);

        let p = ModelParams::init(shape(), 3);
        let mut neg = p.clone();
        for t in neg.tensors_mut() {
            t.iter_mut().for_each(|x| *x = -*x);
        }
        aggregate(&mut server, &[report(0, p.clone(), 5), report(1, neg, 5)], &cfg).unwrap();
        assert!(server.params.flatten().iter().all(|&x| x == 0.0));

        aggregate(&mut server, &[report(2, p.clone(), 7)], &cfg).unwrap();
        assert_eq!(server.params, p);
    }

    #[test]
    fn class_counts_do_not_double_count() {
        let cfg = FederationConfig::default();
        let mut server = ServerState::new(filled(0.0));
        for _ in 0..3 {
            aggregate(
                &mut server,
                &[report(0, filled(0.0), 10), report(1, filled(0.0), 6)],
                &cfg,
            )
            .unwrap();
        }
        assert_eq!(server.class_counts[&0], 16);
    }

    #[test]
    fn aggregation_is_order_invariant() {
        let cfg = FederationConfig::default();
        let reports: Vec<_> = (0..5)
            .map(|c| report(c, ModelParams::init(shape(), c as u64), 3 + c * 7))
            .collect();
        let mut a = ServerState::new(filled(0.0));
        aggregate(&mut a, &reports, &cfg).unwrap();
        let mut rev = reports.clone();
        rev.reverse();
        let mut b = ServerState::new(filled(0.0));
        aggregate(&mut b, &rev, &cfg).unwrap();
        assert_eq!(a.params, b.params);
    }
}
