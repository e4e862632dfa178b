//! Agents, prediction matrices, smoothed majority voting and the baseline
//! consensus rules.
//!
//! Every argmax in this module breaks ties toward the lowest index.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Tape, Tensor, Var};
use crate::data::synthetic::OracleAgent;
use crate::data::Dataset;
use crate::error::{contract, dim_err, Result};
use crate::knapsack::SelectionMask;
use crate::nn::{self, MlpSpec, OutputMode, ParamSet};

/// Specialized / complementary / overall accuracy in percent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentStats {
    pub specialized: f64,
    pub complementary: f64,
    pub overall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentKind {
    Mlp { spec: MlpSpec, params: ParamSet },
    Oracle(OracleAgent),
}

/// One pre-trained ensemble member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentModel {
    pub id: usize,
    pub specialty: Vec<usize>,
    pub kind: AgentKind,
    pub train_stats: AgentStats,
}

impl AgentModel {
    pub fn input_width(&self) -> usize {
        match &self.kind {
            AgentKind::Mlp { spec, .. } => spec.input_width(),
            AgentKind::Oracle(o) => o.dim,
        }
    }

    pub fn classes(&self) -> usize {
        match &self.kind {
            AgentKind::Mlp { spec, .. } => spec.output_width(),
            AgentKind::Oracle(o) => o.classes,
        }
    }

    /// Softmax rows `[B×c]` for a batch `[B×d]`, evaluated without a tape.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.cols() != self.input_width() {
            return Err(dim_err("agent predict", x.shape(), &[self.input_width()]));
        }
        match &self.kind {
            AgentKind::Mlp { spec, params } => {
                if spec.output_mode != OutputMode::Softmax {
                    return Err(contract!("agent {} does not emit softmax outputs", self.id));
                }
                nn::predict(spec, params, x)
            }
            AgentKind::Oracle(o) => {
                let mut data = Vec::with_capacity(x.rows() * o.classes);
                for r in 0..x.rows() {
                    data.extend(o.predict_row(x.row(r)));
                }
                Tensor::new(vec![x.rows(), o.classes], data)
            }
        }
    }
}

impl AgentStats {
    /// Accuracy of `agent` on `data`, split by whether the true class is a specialty.
    pub fn measure(agent: &AgentModel, data: &Dataset) -> Result<Self> {
        let indices: Vec<usize> = (0..data.len()).collect();
        let mut hits = [0usize; 2];
        let mut totals = [0usize; 2];
        for chunk in indices.chunks(512) {
            let probs = agent.predict(&data.batch(chunk))?;
            for (r, &i) in chunk.iter().enumerate() {
                let label = data.labels()[i];
                let slot = usize::from(!agent.specialty.contains(&label));
                totals[slot] += 1;
                if kernels::argmax(probs.row(r)) == Some(label) {
                    hits[slot] += 1;
                }
            }
        }
        let pct = |h: usize, t: usize| if t == 0 { 0.0 } else { 100.0 * h as f64 / t as f64 };
        Ok(Self {
            specialized: pct(hits[0], totals[0]),
            complementary: pct(hits[1], totals[1]),
            overall: pct(hits[0] + hits[1], totals[0] + totals[1]),
        })
    }
}

/// `c×n` matrix whose column `j` is agent `j`'s softmax output.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrix {
    classes: usize,
    agents: usize,
    data: Vec<f64>,
}

impl PredictionMatrix {
    /// Row-major `c×n` values.
    pub fn new(classes: usize, agents: usize, data: Vec<f64>) -> Result<Self> {
        if classes == 0 || agents == 0 || data.len() != classes * agents {
            return Err(dim_err("prediction matrix", &[classes, agents], &[data.len()]));
        }
        Ok(Self {
            classes,
            agents,
            data,
        })
    }

    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let agents = columns.len();
        let classes = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != classes) {
            return Err(contract!("prediction columns have different lengths"));
        }
        let mut data = vec![0.0; classes * agents];
        for (j, col) in columns.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                data[i * agents + j] = v;
            }
        }
        Self::new(classes, agents, data)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn agents(&self) -> usize {
        self.agents
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, class: usize, agent: usize) -> f64 {
        self.data[class * self.agents + agent]
    }

    pub fn column(&self, agent: usize) -> Vec<f64> {
        (0..self.classes).map(|i| self.get(i, agent)).collect()
    }

    /// `v̂ = Σ_j b_j ŷ_j`, the row sums of `B∘P`.
    pub fn masked_sum(&self, mask: &SelectionMask) -> Result<Vec<f64>> {
        if mask.len() != self.agents {
            return Err(dim_err("masked_sum", &[mask.len()], &[self.agents]));
        }
        let mut v = vec![0.0; self.classes];
        for (i, vi) in v.iter_mut().enumerate() {
            let row = &self.data[i * self.agents..(i + 1) * self.agents];
            *vi = mask.selected().map(|j| row[j]).sum();
        }
        Ok(v)
    }
}

fn check_agents(agents: &[AgentModel]) -> Result<(usize, usize)> {
    let first = agents.first().ok_or_else(|| contract!("ensemble is empty"))?;
    let (d, c) = (first.input_width(), first.classes());
    for a in agents {
        if a.input_width() != d || a.classes() != c {
            return Err(dim_err(
                "ensemble",
                &[d, c],
                &[a.input_width(), a.classes()],
            ));
        }
    }
    Ok((d, c))
}

/// Prediction matrix of the frozen ensemble on one input.
pub fn collect_predictions(agents: &[AgentModel], x: &[f64]) -> Result<PredictionMatrix> {
    let x = Tensor::new(vec![1, x.len()], x.to_vec())?;
    Ok(collect_batch(agents, &x)?.remove(0))
}

/// One prediction matrix per row of `x[B×d]`.
pub fn collect_batch(agents: &[AgentModel], x: &Tensor) -> Result<Vec<PredictionMatrix>> {
    let (d, c) = check_agents(agents)?;
    if x.shape().len() != 2 || x.cols() != d {
        return Err(dim_err("collect_predictions", x.shape(), &[d]));
    }
    let n = agents.len();
    let rows = x.rows();
    let mut out = vec![vec![0.0; c * n]; rows];
    for (j, agent) in agents.iter().enumerate() {
        let probs = agent.predict(x)?;
        for (r, m) in out.iter_mut().enumerate() {
            for (i, &p) in probs.row(r).iter().enumerate() {
                m[i * n + j] = p;
            }
        }
    }
    out.into_iter()
        .map(|data| PredictionMatrix::new(c, n, data))
        .collect()
}

/// Prediction matrices for a whole dataset, computed in chunks.
pub fn collect_dataset(agents: &[AgentModel], data: &Dataset) -> Result<Vec<PredictionMatrix>> {
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in indices.chunks(512) {
        out.extend(collect_batch(agents, &data.batch(chunk))?);
    }
    Ok(out)
}

/// Stacks matrices into a `[B×c×n]` tensor for the tape.
pub fn stack(mats: &[&PredictionMatrix]) -> Result<Tensor> {
    let first = mats.first().ok_or_else(|| contract!("no prediction matrices"))?;
    let (c, n) = (first.classes, first.agents);
    let mut data = Vec::with_capacity(mats.len() * c * n);
    for m in mats {
        if (m.classes, m.agents) != (c, n) {
            return Err(dim_err("stack", &[c, n], &[m.classes, m.agents]));
        }
        data.extend_from_slice(&m.data);
    }
    Tensor::new(vec![mats.len(), c, n], data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction {
    pub y_hat: Vec<f64>,
    pub class: usize,
    pub mask: SelectionMask,
}

/// Tape handles produced by [`mask_and_vote`].
#[derive(Debug, Clone, Copy)]
pub struct VoteNodes {
    pub v_hat: Var,
    pub y_hat: Var,
}

/// Smoothed vote on the tape: `v̂ = Σ_j b_j ŷ_j` per row, `ŷ = softmax(v̂)`.
///
/// `predictions` is `[B×c×n]`, `mask` is `[B×n]`; gradients flow to `mask`.
pub fn mask_and_vote(tape: &mut Tape, predictions: Var, mask: Var) -> Result<VoteNodes> {
    let v_hat = tape.batched_matvec(predictions, mask)?;
    let y_hat = tape.softmax_rows(v_hat);
    Ok(VoteNodes { v_hat, y_hat })
}

/// Tape-free smoothed vote for a single input.
pub fn smoothed_vote(p: &PredictionMatrix, mask: &SelectionMask) -> Result<EnsemblePrediction> {
    let mut y_hat = p.masked_sum(mask)?;
    kernels::softmax_inplace(&mut y_hat);
    let class = predict_class(&y_hat)?;
    Ok(EnsemblePrediction {
        y_hat,
        class,
        mask: mask.clone(),
    })
}

pub fn predict_class(y_hat: &[f64]) -> Result<usize> {
    kernels::argmax(y_hat).ok_or_else(|| contract!("cannot take argmax of an empty vector"))
}

fn argmax_unchecked(v: &[f64]) -> usize {
    kernels::argmax(v).unwrap_or(0)
}

/// Argmax of the column mean.
pub fn baseline_unweighted_average(p: &PredictionMatrix) -> usize {
    let sums = p.masked_sum(&SelectionMask::all(p.agents)).expect("full mask");
    argmax_unchecked(&sums)
}

/// Plurality of the per-agent hard predictions.
pub fn baseline_majority_vote(p: &PredictionMatrix) -> usize {
    let mut votes = vec![0.0; p.classes];
    for j in 0..p.agents {
        votes[argmax_unchecked(&p.column(j))] += 1.0;
    }
    argmax_unchecked(&votes)
}

/// Unweighted average over a uniformly drawn `k`-subset of agents.
pub fn baseline_random_selection<R: Rng + ?Sized>(
    p: &PredictionMatrix,
    k: usize,
    rng: &mut R,
) -> Result<usize> {
    let mask = random_subset(p.agents, k, rng)?;
    Ok(argmax_unchecked(&p.masked_sum(&mask)?))
}

/// Uniform `k`-subset of `0..n` without replacement.
pub fn random_subset<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<SelectionMask> {
    if k == 0 || k > n {
        return Err(contract!("sub-ensemble size must satisfy 1 ≤ k ≤ n, got k={k}, n={n}"));
    }
    if k == n {
        return Ok(SelectionMask::all(n));
    }
    let picked = rand::seq::index::sample(rng, n, k).into_vec();
    SelectionMask::from_indices(n, &picked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn predict_class_cases() {
        assert_eq!(predict_class(&[0.1, 0.7, 0.2]).unwrap(), 1);
        assert_eq!(predict_class(&[0.5, 0.5]).unwrap(), 0);
        assert!(predict_class(&[]).is_err());
    }

    #[test]
    fn majority_vote_fixture() {
        let p = PredictionMatrix::from_columns(&[
            vec![0.1, 0.8, 0.1],
            vec![0.2, 0.5, 0.3],
            vec![0.1, 0.1, 0.8],
        ])
        .unwrap();
        assert_eq!(baseline_majority_vote(&p), 1);
    }

    #[test]
    fn unweighted_average_tie_goes_to_lowest() {
        let p = PredictionMatrix::from_columns(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(baseline_unweighted_average(&p), 0);
        let single = PredictionMatrix::from_columns(&[vec![0.2, 0.3, 0.5]]).unwrap();
        assert_eq!(baseline_unweighted_average(&single), 2);
    }

    #[test]
    fn single_agent_vote_is_its_softmax() {
        let cols = [vec![0.2, 0.3, 0.5], vec![0.6, 0.3, 0.1]];
        let p = PredictionMatrix::from_columns(&cols).unwrap();
        let mask = SelectionMask::from_indices(2, &[1]).unwrap();
        let out = smoothed_vote(&p, &mask).unwrap();
        let mut expected = cols[1].clone();
        kernels::softmax_inplace(&mut expected);
        assert_eq!(out.y_hat, expected);
        assert_eq!(out.class, 0);
    }

    #[test]
    fn random_selection_contract() {
        let p = PredictionMatrix::from_columns(&[vec![0.4, 0.6], vec![0.9, 0.1]]).unwrap();
        let mut rng = substream(0, "t", 0);
        assert!(baseline_random_selection(&p, 0, &mut rng).is_err());
        assert!(baseline_random_selection(&p, 3, &mut rng).is_err());
        assert_eq!(
            baseline_random_selection(&p, 2, &mut rng).unwrap(),
            baseline_unweighted_average(&p)
        );
    }

    #[test]
    fn masked_sum_rejects_wrong_length() {
        let p = PredictionMatrix::from_columns(&[vec![0.4, 0.6]]).unwrap();
        assert!(p.masked_sum(&SelectionMask::all(2)).is_err());
    }
}
