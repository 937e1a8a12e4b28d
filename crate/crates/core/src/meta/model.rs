use crate::adapters::AdapterParams;
use crate::classifier::{head_forward, HeadOutput, LinearHead, HEAD_B, HEAD_W};
use crate::encoder::{backward, encode_with_trace, AuxFeature, AuxFeatures, EncoderGradSinks, EncoderParams, ForwardOptions, Tokenizer};
use crate::episodes::{prepare_users, sample_indices, CampaignDataset, Label, Split};
use crate::error::{Error, Result};
use crate::numerics::{softmax_cross_entropy, ParamSet, Scalar, Tensor};

/// A prepared, tokenized user.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedUser {
    pub user_id: String,
    pub tokens: Vec<u32>,
    /// Auxiliary values appended to the CLS representation.
    pub aux: Vec<f64>,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedCampaign {
    pub campaign_id: String,
    pub split: Split,
    pub users: Vec<EncodedUser>,
}

/// Support and query users of one episode, troll users first within each set.
#[derive(Clone, Debug)]
pub struct Task<'a> {
    pub campaign_id: &'a str,
    pub support: Vec<&'a EncodedUser>,
    pub query: Vec<&'a EncodedUser>,
}

impl EncodedCampaign {
    /// Prepares users against the campaign window, then tokenizes them.
    pub fn from_dataset(ds: &CampaignDataset, tokenizer: &Tokenizer, aux: &[AuxFeature]) -> Result<Self> {
        let prepared = prepare_users(ds, ds.window);
        let users = prepared
            .users
            .iter()
            .map(|u| {
                let aux = AuxFeatures::extract(u, aux)?.values.into_iter().map(|(_, v)| v).collect();
                Ok(EncodedUser { user_id: u.user_id.clone(), tokens: tokenizer.tokenize_user(u)?, aux, label: u.label })
            })
            .collect::<Result<_>>()?;
        Ok(EncodedCampaign { campaign_id: ds.campaign_id.clone(), split: ds.split, users })
    }

    /// Indices of each class's users.
    pub fn class_members(&self) -> [Vec<usize>; 2] {
        Label::ALL.map(|y| (0..self.users.len()).filter(|&i| self.users[i].label == y).collect())
    }

    pub fn has_episode_capacity(&self, s: usize, q: usize) -> bool {
        self.class_members().iter().all(|m| m.len() >= s + q)
    }

    /// `s` support and `q` query users per class.
    pub fn sample_task(&self, s: usize, q: usize, seed: u64) -> Result<Task<'_>> {
        let members = self.class_members();
        let idx = sample_indices([members[0].len(), members[1].len()], s, q, seed)
            .map_err(|e| Error::input(format!("campaign {}: {e}", self.campaign_id)))?;
        let members = &members;
        let pick = |sel: &[Vec<usize>; 2]| -> Vec<&EncodedUser> {
            (0..2).flat_map(|k| sel[k].iter().map(move |&i| &self.users[members[k][i]])).collect()
        };
        Ok(Task { campaign_id: &self.campaign_id, support: pick(&idx.support), query: pick(&idx.query) })
    }

    /// Users of the given label.
    pub fn users_with(&self, label: Label) -> impl Iterator<Item = &EncodedUser> {
        self.users.iter().filter(move |u| u.label == label)
    }
}

/// The parameters a task adapts: an optional adapter stack and a head.
#[derive(Clone, Debug, PartialEq)]
pub struct Learner<T> {
    pub adapter: Option<AdapterParams<T>>,
    pub head: LinearHead<T>,
    /// Whether the head takes gradient steps (stage 3, meta-test) or stays frozen (stage 2).
    pub train_head: bool,
}

impl<T: Scalar> Learner<T> {
    /// Trainable tensors as one set: adapter paths plus `head.w`/`head.b` when the head trains.
    pub fn joint(&self) -> ParamSet<T> {
        let mut p = ParamSet::new();
        if let Some(a) = &self.adapter {
            for (path, t) in a.params.iter() {
                p.insert(path, t.clone(), a.params.is_trainable(path));
            }
        }
        if self.train_head {
            p.insert(HEAD_W, self.head.w.clone(), true);
            p.insert(HEAD_B, self.head.b.clone(), true);
        }
        p
    }

    /// Copy with trainable tensors replaced from `joint`.
    pub fn with_joint(&self, joint: &ParamSet<T>) -> Result<Learner<T>> {
        let mut out = self.clone();
        if let Some(a) = &mut out.adapter {
            let paths: Vec<String> = a.params.paths().map(str::to_string).collect();
            for path in paths {
                *a.params.get_mut(&path)? = joint.get(&path)?.clone();
            }
        }
        if self.train_head {
            out.head = LinearHead::from_params(joint)?;
        }
        Ok(out)
    }

    pub fn cast<S: Scalar>(&self, f: impl Fn(T) -> S) -> Learner<S> {
        Learner { adapter: self.adapter.as_ref().map(|a| a.cast(&f)), head: self.head.cast(&f), train_head: self.train_head }
    }

    /// `θ ← θ − rate(path)·g` over the trainable paths of `grads`.
    pub fn step(&mut self, grads: &ParamSet<T>, rate: impl Fn(&str) -> Result<T>) -> Result<()> {
        for (path, g) in grads.iter() {
            let target = if path == HEAD_W || path == HEAD_B {
                if !self.train_head {
                    continue;
                }
                if path == HEAD_W {
                    &mut self.head.w
                } else {
                    &mut self.head.b
                }
            } else {
                let a = self.adapter.as_mut().ok_or_else(|| Error::NotFound(format!("parameter {path}")))?;
                if !a.params.is_trainable(path) {
                    continue;
                }
                a.params.get_mut(path)?
            };
            if target.shape() != g.shape() {
                return Err(Error::config(format!("gradient for {path} has shape {:?}, expected {:?}", g.shape(), target.shape())));
            }
            target.axpy(-rate(path)?, g);
        }
        Ok(())
    }
}

/// Per-user representation: CLS vector followed by the auxiliary values.
pub fn represent<T: Scalar>(
    phi: &EncoderParams<T>,
    adapter: Option<&AdapterParams<T>>,
    user: &EncodedUser,
    opts: &ForwardOptions,
) -> Result<Vec<T>> {
    let (mut v, _) = encode_with_trace(&user.tokens, phi, adapter, opts)?;
    v.extend(user.aux.iter().map(|&x| T::lit(x)));
    Ok(v)
}

pub fn classify<T: Scalar>(
    phi: &EncoderParams<T>,
    adapter: Option<&AdapterParams<T>>,
    head: &LinearHead<T>,
    user: &EncodedUser,
) -> Result<HeadOutput<T>> {
    head_forward(&represent(phi, adapter, user, &ForwardOptions::eval())?, head)
}

/// Fraction of `users` classified correctly.
pub fn accuracy(
    phi: &EncoderParams<f64>,
    adapter: Option<&AdapterParams<f64>>,
    head: &LinearHead<f64>,
    users: &[&EncodedUser],
) -> Result<f64> {
    if users.is_empty() {
        return Err(Error::input("accuracy over an empty user set"));
    }
    let mut correct = 0usize;
    for u in users {
        if classify(phi, adapter, head, u)?.label == u.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / users.len() as f64)
}

/// Which gradients [`batch_loss`] should produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Want {
    pub encoder: bool,
    pub learner: bool,
}

impl Want {
    pub const NONE: Want = Want { encoder: false, learner: false };
    pub const LEARNER: Want = Want { encoder: false, learner: true };
    pub const ALL: Want = Want { encoder: true, learner: true };
}

#[derive(Clone, Debug)]
pub struct BatchOutput<T> {
    /// Mean cross-entropy.
    pub loss: T,
    pub correct: usize,
    /// Gradient of the mean loss in [`Learner::joint`] layout.
    pub learner_grads: Option<ParamSet<T>>,
    /// Gradient of the mean loss w.r.t. every encoder tensor.
    pub encoder_grads: Option<ParamSet<T>>,
}

/// Mean cross-entropy over `users` and the requested gradients.
///
/// In train mode user `i` draws its dropout masks from `opts.seed + i`.
pub fn batch_loss<T: Scalar>(
    phi: &EncoderParams<T>,
    learner: &Learner<T>,
    users: &[&EncodedUser],
    want: Want,
    opts: &ForwardOptions,
) -> Result<BatchOutput<T>> {
    if users.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let d = phi.config.d_model;
    let scale = T::lit(1.0 / users.len() as f64);
    let mut learner_grads = want.learner.then(|| learner.joint().zeros_like());
    let mut encoder_grads = want.encoder.then(|| phi.params.zeros_like());
    let adapter = learner.adapter.as_ref();
    let need_backward = want.encoder || (want.learner && adapter.is_some());
    let mut loss = T::zero();
    let mut correct = 0;
    for (i, u) in users.iter().enumerate() {
        let o = ForwardOptions { seed: opts.seed.wrapping_add(i as u64), ..*opts };
        let (cls, trace) = encode_with_trace(&u.tokens, phi, adapter, &o)?;
        let mut v = cls;
        v.extend(u.aux.iter().map(|&x| T::lit(x)));
        let logits = learner.head.logits(&v)?;
        let (l, dl) = softmax_cross_entropy(&Tensor::vector(logits.to_vec())?, u.label.index())?;
        loss = loss + l;
        if crate::classifier::argmax_label(&logits) == u.label {
            correct += 1;
        }
        if !(want.learner || want.encoder) {
            continue;
        }
        let dl = [dl.data()[0] * scale, dl.data()[1] * scale];
        let (hg, dv) = learner.head.backward(&v, &dl);
        if let Some(g) = learner_grads.as_mut().filter(|_| learner.train_head) {
            g.get_mut(HEAD_W)?.axpy(T::one(), hg.get(HEAD_W)?);
            g.get_mut(HEAD_B)?.axpy(T::one(), hg.get(HEAD_B)?);
        }
        if need_backward {
            let sinks = EncoderGradSinks {
                encoder: encoder_grads.as_mut(),
                adapters: if adapter.is_some() { learner_grads.as_mut() } else { None },
            };
            backward(&trace, &dv[..d], phi, adapter, sinks)?;
        }
    }
    Ok(BatchOutput { loss: loss * scale, correct, learner_grads, encoder_grads })
}
