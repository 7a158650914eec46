//! Linkage analysis over a round transcript.
//!
//! The coalition is the server plus a set of colluding mix nodes. Colluding
//! nodes reveal how their outputs map to inputs; honest nodes reveal only
//! their batches. The adversary tracks a probability distribution over
//! senders for every onion, averaging across each honest node's batch.
//! Ties between equally likely senders are broken toward the sender of the
//! input at the same batch position as the output, which wins outright
//! against a node that does not shuffle.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;

use super::round::Transcript;
use crate::model::ClientId;

const TIE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Default)]
struct Belief {
    dist: BTreeMap<ClientId, f64>,
    hint: Option<ClientId>,
}

impl Belief {
    fn exact(sender: ClientId) -> Self {
        Self { dist: BTreeMap::from([(sender, 1.0)]), hint: Some(sender) }
    }

    fn top(&self) -> Option<ClientId> {
        let max = self.dist.values().copied().fold(0.0, f64::max);
        let tied: Vec<ClientId> = self.dist.iter().filter(|(_, &p)| p >= max - TIE_EPS).map(|(&c, _)| c).collect();
        match self.hint {
            Some(h) if tied.contains(&h) => Some(h),
            _ => tied.first().copied(),
        }
    }
}

/// The adversary's verdict on one terminal vote.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attribution {
    pub terminal_id: u64,
    pub guess: ClientId,
    /// Number of senders sharing the highest posterior probability.
    pub tied: usize,
    pub truth: ClientId,
    /// Honest nodes on the vote's actual path.
    pub honest_hops: usize,
}

impl Attribution {
    pub fn correct(&self) -> bool {
        self.guess == self.truth
    }
}

pub struct LinkageAdversary {
    colluding: HashSet<ClientId>,
}

impl LinkageAdversary {
    pub fn new(colluding: impl IntoIterator<Item = ClientId>) -> Self {
        Self { colluding: colluding.into_iter().collect() }
    }

    pub fn attribute<G: Rng + ?Sized>(&self, transcript: &Transcript, rng: &mut G) -> Vec<Attribution> {
        let mut beliefs: HashMap<u64, Belief> = HashMap::new();
        let mut truth: HashMap<u64, (ClientId, usize)> = HashMap::new();
        for (id, &sender) in transcript.senders.iter().enumerate() {
            beliefs.insert(id as u64, Belief::exact(sender));
            truth.insert(id as u64, (sender, 0));
        }
        for step in &transcript.steps {
            let honest = !self.colluding.contains(&step.node);
            let inputs: Vec<Belief> = step.inputs.iter().map(|id| beliefs.remove(id).unwrap_or_default()).collect();
            let mixed = honest.then(|| {
                let mut avg: BTreeMap<ClientId, f64> = BTreeMap::new();
                for b in &inputs {
                    for (&c, &p) in &b.dist {
                        *avg.entry(c).or_insert(0.0) += p;
                    }
                }
                let total: f64 = avg.values().sum();
                avg.values_mut().for_each(|p| *p /= total);
                avg
            });
            for (k, (&out, src)) in step.outputs.iter().zip(&step.sources).enumerate() {
                let belief = match &mixed {
                    Some(avg) => Belief { dist: avg.clone(), hint: inputs.get(k).and_then(Belief::top) },
                    None => src.and_then(|j| inputs.get(j).cloned()).unwrap_or_default(),
                };
                beliefs.insert(out, belief);
                if let Some((sender, hops)) = src.and_then(|j| truth.get(&step.inputs[j]).copied()) {
                    truth.insert(out, (sender, hops + usize::from(honest)));
                }
            }
        }
        transcript
            .terminal
            .iter()
            .filter_map(|(id, _)| {
                let belief = beliefs.get(id)?;
                let &(sender, honest_hops) = truth.get(id)?;
                let max = belief.dist.values().copied().fold(0.0, f64::max);
                let tied: Vec<ClientId> =
                    belief.dist.iter().filter(|(_, &p)| p >= max - TIE_EPS).map(|(&c, _)| c).collect();
                let guess = match belief.hint {
                    Some(h) if tied.contains(&h) => h,
                    _ => *tied.choose(rng)?,
                };
                Some(Attribution { terminal_id: *id, guess, tied: tied.len(), truth: sender, honest_hops })
            })
            .collect()
    }
}
