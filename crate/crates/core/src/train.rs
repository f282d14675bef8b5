//! Alternating optimization of parameters and spectral embedding.
//!
//! Each iteration takes one Adam step on all trainable parameters with the
//! embedding F held fixed, then refreshes F as the k smallest Laplacian
//! eigenvectors of the new consensus graph. The λ schedule exploits the
//! equivalence between "k zero Laplacian eigenvalues" and "k connected
//! components": too few components means rank pressure is too weak, so λ
//! doubles (capped) and the state is checkpointed; too many means the last
//! push cut too deep, so parameters, optimizer moments, and F roll back to
//! the checkpoint and λ halves. Exactly k components terminates, and the
//! labels are read straight off the components. No rounding step such as
//! K-means is involved.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{connected_components, laplacian, ConnectionGraph};
use crate::linalg::sym_eigs_smallest;
use crate::loss::{
    compute_leaf_inputs, forward_core, forward_with_gradients_core, loss_sc, Gradients,
    LeafInputs, LossBreakdown, Mode, ParameterSet,
};
use crate::loss::init_params;
use crate::view::ViewStructure;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub mode: Mode,
    /// Target number of clusters.
    pub k: usize,
    /// Starting rank-pressure weight.
    pub lambda_init: f64,
    /// Upper bound for the doubling schedule.
    pub lambda_max: f64,
    /// Activation sharpening factor, must exceed 1.
    pub p: f64,
    /// Adam learning rate.
    pub lr: f64,
    /// Neighbors retained per row when sparsifying distances.
    pub r: usize,
    /// Iteration fuse for the schedule loop.
    pub max_iters: usize,
    /// Recorded for provenance; the optimization itself is deterministic.
    pub seed: u64,
}

impl TrainerConfig {
    /// Defaults per mode. Only `k` has no sensible universal value.
    pub fn for_mode(mode: Mode, k: usize) -> Self {
        match mode {
            Mode::Ann => TrainerConfig {
                mode,
                k,
                lambda_init: 15.0,
                lambda_max: 1e5,
                p: 1.13,
                lr: 0.05,
                r: 10,
                max_iters: 1000,
                seed: 0,
            },
            Mode::Annld => TrainerConfig {
                mode,
                k,
                lambda_init: 15.0,
                lambda_max: 1e7,
                p: 1.05,
                lr: 0.1,
                r: 9,
                max_iters: 1000,
                seed: 0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidArgument {
                name: "k",
                reason: format!("k = {} must be at least 2", self.k),
            });
        }
        if !(self.p > 1.0) || !self.p.is_finite() {
            return Err(Error::InvalidArgument {
                name: "p",
                reason: format!("P = {} must be finite and > 1", self.p),
            });
        }
        if !(self.lambda_init > 0.0) || !self.lambda_init.is_finite() {
            return Err(Error::InvalidArgument {
                name: "lambda_init",
                reason: format!("λ_init = {} must be finite and > 0", self.lambda_init),
            });
        }
        if !(self.lambda_max >= self.lambda_init) || !self.lambda_max.is_finite() {
            return Err(Error::InvalidArgument {
                name: "lambda_max",
                reason: format!(
                    "λ_max = {} must be finite and >= λ_init = {}",
                    self.lambda_max, self.lambda_init
                ),
            });
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidArgument {
                name: "lr",
                reason: format!("learning rate {} must be finite and > 0", self.lr),
            });
        }
        if self.r < 1 {
            return Err(Error::InvalidArgument {
                name: "r",
                reason: "neighbor count r must be at least 1".into(),
            });
        }
        if self.max_iters < 1 {
            return Err(Error::InvalidArgument {
                name: "max_iters",
                reason: "iteration limit must be at least 1".into(),
            });
        }
        Ok(())
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: ParameterSet,
    v: ParameterSet,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ParameterSet) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One Adam update in place, with bias-corrected moments.
///
/// Panics if the gradient shapes differ from the parameter shapes; both
/// sides come from the same structure in normal use.
pub fn adam_step(params: &mut ParameterSet, grads: &Gradients, state: &mut AdamState, lr: f64) {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);

    let mut p_flat = params.flat_mut();
    let g_flat = grads.flat();
    let mut m_flat = state.m.flat_mut();
    let mut v_flat = state.v.flat_mut();
    assert_eq!(p_flat.len(), g_flat.len(), "gradient set shape mismatch");

    for (((pt, gt), mt), vt) in p_flat
        .iter_mut()
        .zip(&g_flat)
        .zip(m_flat.iter_mut())
        .zip(v_flat.iter_mut())
    {
        assert_eq!(pt.len(), gt.len(), "gradient tensor shape mismatch");
        for i in 0..pt.len() {
            let g = gt[i];
            mt[i] = BETA1 * mt[i] + (1.0 - BETA1) * g;
            vt[i] = BETA2 * vt[i] + (1.0 - BETA2) * g * g;
            let m_hat = mt[i] / bc1;
            let v_hat = vt[i] / bc2;
            pt[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

/// Refreshes the spectral embedding: the k eigenvectors of the consensus
/// Laplacian with the smallest eigenvalues, plus the sum of those
/// eigenvalues (zero exactly when the graph has at least k components).
pub fn update_f(s_c: &ConnectionGraph, k: usize) -> Result<(Array2<f64>, f64)> {
    let l = laplacian(s_c);
    let eig = sym_eigs_smallest(&l, k)?;
    let sum = eig.values.iter().sum();
    Ok((eig.vectors, sum))
}

/// What the λ schedule decided after seeing a component count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleAction {
    /// Too few components: pressure accepted, λ doubled (capped), state
    /// should be checkpointed.
    AcceptDouble,
    /// Too many components: λ halved, state should roll back.
    RestoreHalve,
    /// Exactly k components: stop.
    Terminate,
}

/// The λ portion of the schedule state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleState {
    pub lambda: f64,
    pub lambda_max: f64,
}

/// Adjusts λ from a component count. The caller owns the snapshot side:
/// checkpoint on [`ScheduleAction::AcceptDouble`], roll back on
/// [`ScheduleAction::RestoreHalve`].
pub fn schedule_lambda(state: &mut ScheduleState, component_count: usize, k: usize) -> ScheduleAction {
    match component_count.cmp(&k) {
        std::cmp::Ordering::Less => {
            state.lambda = (2.0 * state.lambda).min(state.lambda_max);
            ScheduleAction::AcceptDouble
        }
        std::cmp::Ordering::Greater => {
            state.lambda /= 2.0;
            ScheduleAction::RestoreHalve
        }
        std::cmp::Ordering::Equal => ScheduleAction::Terminate,
    }
}

/// One row of the optimization trace. Row 0 describes the initial state;
/// row t > 0 describes the state after gradient step t, with `lambda` the
/// weight that step used.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub lambda: f64,
    pub components: usize,
    pub eigval_sum: f64,
    pub losses: LossBreakdown,
}

/// Outcome of a training run. When the schedule never hits exactly k
/// components within the iteration fuse, `converged` is false and the
/// graph/labels come from the visited state whose component count was
/// closest to k (ties resolved toward the latest iteration).
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub labels: Vec<usize>,
    pub s_c: ConnectionGraph,
    pub trace: Vec<TraceRow>,
    pub converged: bool,
    pub iterations: usize,
    pub config: TrainerConfig,
}

#[derive(Clone)]
struct Snapshot {
    params: ParameterSet,
    adam: AdamState,
    f: Array2<f64>,
}

struct Best {
    dist: usize,
    s_c: ConnectionGraph,
    labels: Vec<usize>,
}

impl Best {
    fn offer(&mut self, count: usize, k: usize, s_c: &ConnectionGraph, labels: &[usize]) {
        let dist = count.abs_diff(k);
        if dist <= self.dist {
            self.dist = dist;
            self.s_c = s_c.clone();
            self.labels = labels.to_vec();
        }
    }
}

/// Runs the full alternating optimization on a validated dataset/structure
/// pair.
pub fn train(
    config: &TrainerConfig,
    dataset: &Dataset,
    structure: &ViewStructure,
) -> Result<TrainResult> {
    config.validate()?;
    let n = structure.n_samples();
    if config.k > n {
        return Err(Error::InvalidArgument {
            name: "k",
            reason: format!("k = {} exceeds the sample count {n}", config.k),
        });
    }
    let mode = config.mode;
    let k = config.k;

    let mut params = init_params(dataset, structure, mode, config.r)?;
    let mut adam = AdamState::new(&params);

    // Plain-mode distances never change; compute them once.
    let fixed_inputs: Option<Vec<LeafInputs>> = match mode {
        Mode::Ann => Some(compute_leaf_inputs(&params, dataset, structure, mode, config.r)?),
        Mode::Annld => None,
    };
    let fresh_inputs = |params: &ParameterSet| -> Result<Option<Vec<LeafInputs>>> {
        match mode {
            Mode::Ann => Ok(None),
            Mode::Annld => Ok(Some(compute_leaf_inputs(
                params, dataset, structure, mode, config.r,
            )?)),
        }
    };

    // Initial state: build the graphs, then derive F from them. The probe
    // pass uses λ = 0 and a placeholder F; only its F-independent loss
    // terms are kept.
    //
    // `carried` caches learnable-mode inputs valid for the CURRENT
    // parameters. A pass at unchanged parameters may reuse them; any
    // parameter change (Adam step or snapshot restore) invalidates them.
    let probe_f = Array2::zeros((n, 1));
    let mut carried = fresh_inputs(&params)?;
    let init_inputs: &[LeafInputs] = carried
        .as_deref()
        .or(fixed_inputs.as_deref())
        .expect("one input source exists");
    let probe = forward_core(
        &params, dataset, structure, mode, config.p, 0.0, &probe_f, init_inputs,
    )?;
    let s0 = probe.consensus_graph();
    let (mut f, eigsum0) = update_f(&s0, k)?;
    let sc0 = loss_sc(&f, &s0, config.lambda_init)?;
    let losses0 = LossBreakdown {
        sc: sc0,
        gc: probe.losses.gc,
        cac: probe.losses.cac,
        total: sc0 + probe.losses.gc + probe.losses.cac,
    };
    let (count0, labels0) = connected_components(&s0);

    let mut trace = vec![TraceRow {
        iteration: 0,
        lambda: config.lambda_init,
        components: count0,
        eigval_sum: eigsum0,
        losses: losses0,
    }];
    let mut best = Best {
        dist: count0.abs_diff(k),
        s_c: s0.clone(),
        labels: labels0.clone(),
    };

    if count0 == k {
        return Ok(TrainResult {
            labels: labels0,
            s_c: s0,
            trace,
            converged: true,
            iterations: 0,
            config: config.clone(),
        });
    }

    let mut sched = ScheduleState {
        lambda: config.lambda_init,
        lambda_max: config.lambda_max,
    };
    let mut snapshot = Snapshot {
        params: params.clone(),
        adam: adam.clone(),
        f: f.clone(),
    };

    let mut converged = false;
    let mut iterations = 0;

    for step in 1..=config.max_iters {
        iterations = step;
        let lambda = sched.lambda;

        // Gradient step at the current state. A restore cleared the cache,
        // so rebuild inputs for the restored parameters if needed.
        if mode == Mode::Annld && carried.is_none() {
            carried = fresh_inputs(&params)?;
        }
        let grad_inputs: &[LeafInputs] = carried
            .as_deref()
            .or(fixed_inputs.as_deref())
            .expect("one input source exists");
        let (_, grads): (_, Gradients) = forward_with_gradients_core(
            &params, dataset, structure, mode, config.p, lambda, &f, grad_inputs,
        )?;
        adam_step(&mut params, &grads, &mut adam, config.lr);

        // Evaluate the stepped state and refresh the embedding. The step
        // moved the parameters, so learnable-mode inputs are rebuilt here;
        // they stay valid through the next gradient pass.
        carried = fresh_inputs(&params)?;
        let post_inputs: &[LeafInputs] = carried
            .as_deref()
            .or(fixed_inputs.as_deref())
            .expect("one input source exists");
        let post = forward_core(
            &params, dataset, structure, mode, config.p, lambda, &f, post_inputs,
        )?;
        let s_c = post.consensus_graph();
        let (f_new, eigsum) = update_f(&s_c, k)?;
        let sc_new = loss_sc(&f_new, &s_c, lambda)?;
        let losses = LossBreakdown {
            sc: sc_new,
            gc: post.losses.gc,
            cac: post.losses.cac,
            total: sc_new + post.losses.gc + post.losses.cac,
        };
        let (count, labels) = connected_components(&s_c);

        trace.push(TraceRow {
            iteration: step,
            lambda,
            components: count,
            eigval_sum: eigsum,
            losses,
        });
        best.offer(count, k, &s_c, &labels);

        match schedule_lambda(&mut sched, count, k) {
            ScheduleAction::Terminate => {
                converged = true;
                best.s_c = s_c;
                best.labels = labels;
                break;
            }
            ScheduleAction::AcceptDouble => {
                f = f_new;
                snapshot = Snapshot {
                    params: params.clone(),
                    adam: adam.clone(),
                    f: f.clone(),
                };
            }
            ScheduleAction::RestoreHalve => {
                params = snapshot.params.clone();
                adam = snapshot.adam.clone();
                f = snapshot.f.clone();
                carried = None;
            }
        }
    }

    Ok(TrainResult {
        labels: best.labels,
        s_c: best.s_c,
        trace,
        converged,
        iterations,
        config: config.clone(),
    })
}
