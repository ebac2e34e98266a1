//! A dataset joined with its embeddings: everything a retriever needs to act
//! on one instance.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Dataset, Demonstration, DemonstrationBank, Split, TaggingInstance};
use crate::embed::EmbeddingIndex;
use crate::policy::{
    advance_state, fuse_query, greedy_action, promptpg_scores, score_actions, Action, PolicyParameters,
    PromptPgParameters,
};
use crate::tensor::Matrix;
use crate::{Error, Result};

pub struct Task<'a> {
    pub dataset: &'a Dataset,
    pub index: &'a EmbeddingIndex,
    banks: BTreeMap<String, Matrix>,
}

/// One instance with its resolved embeddings and bank.
#[derive(Clone, Copy)]
pub struct Query<'t> {
    pub instance: &'t TaggingInstance,
    pub knowledge: &'t [f64],
    pub question: &'t [f64],
    pub bank: &'t DemonstrationBank,
    pub bank_matrix: &'t Matrix,
}

impl Query<'_> {
    pub fn demos(&self, selected: &[usize]) -> Vec<&Demonstration> {
        selected.iter().map(|&i| &self.bank.demonstrations[i]).collect()
    }
}

impl<'a> Task<'a> {
    /// Builds bank matrices; every demonstration must already carry an
    /// embedding of dimension `index.dim`.
    pub fn new(dataset: &'a Dataset, index: &'a EmbeddingIndex) -> Result<Self> {
        let mut banks = BTreeMap::new();
        for (kid, bank) in &dataset.banks {
            let mut data = Vec::with_capacity(bank.len() * index.dim);
            for d in &bank.demonstrations {
                let e = d
                    .embedding
                    .as_ref()
                    .ok_or_else(|| Error::MissingEmbedding(format!("demonstration `{}`", d.id)))?;
                if e.dim() != index.dim {
                    return Err(Error::DimensionMismatch {
                        expected: index.dim,
                        actual: e.dim(),
                    });
                }
                data.extend_from_slice(e.as_slice());
            }
            banks.insert(kid.clone(), Matrix::from_vec(bank.len(), index.dim, data));
        }
        Ok(Self { dataset, index, banks })
    }

    pub fn dim(&self) -> usize {
        self.index.dim
    }

    pub fn query<'t>(&'t self, instance: &'t TaggingInstance) -> Result<Query<'t>> {
        let kid = &instance.knowledge_id;
        let bank = self
            .dataset
            .bank(kid)
            .filter(|b| !b.is_empty())
            .ok_or_else(|| Error::InvalidArgument(format!("no demonstration bank for knowledge `{kid}`")))?;
        Ok(Query {
            instance,
            knowledge: self.index.knowledge(kid)?.as_slice(),
            question: self.index.question(&instance.id)?.as_slice(),
            bank,
            bank_matrix: &self.banks[kid],
        })
    }
}

/// Greedy decoding of the recurrent policy: at most `max_shots` selections,
/// ending early when the stop slot wins.
pub fn greedy_selection(
    params: &PolicyParameters,
    query: &Query<'_>,
    max_shots: usize,
    stop_enabled: bool,
) -> Result<Vec<usize>> {
    let n = query.bank_matrix.rows();
    let mut state = fuse_query(query.knowledge, query.question, params)?;
    for t in 0..max_shots {
        if !stop_enabled && params.options.mask_selected && t >= n {
            break;
        }
        let dist = score_actions(&state, query.bank_matrix, params, stop_enabled)?;
        match Action::from_slot(greedy_action(&dist).0, n) {
            Action::Stop => break,
            Action::Select(i) => {
                if t + 1 < max_shots {
                    state = advance_state(&state, query.bank_matrix.row(i), params)?;
                }
                state.selected.push(i);
            }
        }
    }
    Ok(state.selected)
}

/// The `k` highest-probability demonstrations under the PromptPG scorer,
/// in descending order, lowest index first on ties.
pub fn promptpg_top_k(params: &PromptPgParameters, query: &Query<'_>, k: usize) -> Result<Vec<usize>> {
    let probs = promptpg_scores(query.knowledge, query.question, query.bank_matrix, params)?;
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// Deterministically splits the train instances into a held-out slice of at
/// most `size` (and at most a quarter of train) and the rest. The held-out
/// slice serves as the training probe and as the validation split.
pub fn held_out_train(dataset: &Dataset, seed: u64, size: usize) -> (Vec<&TaggingInstance>, Vec<&TaggingInstance>) {
    let mut train: Vec<&TaggingInstance> = dataset.split(Split::Train).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    train.shuffle(&mut rng);
    let k = size.min(train.len() / 4);
    let rest = train.split_off(k);
    (train, rest)
}
