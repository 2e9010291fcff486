//! Tabular conditional softmax policies.
//!
//! A policy stores one logit vector per `(context, position)`. Missing entries
//! are the all-zeros vector, so an untouched policy is uniform. Tokens at
//! different positions are independent given the context, which keeps
//! log-probabilities, gradients and KL divergences in closed form.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tree::Token;

/// Conditioning tuple for one generation: task, parent candidate and the
/// parent's public feedback, each reduced to a digest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ContextKey {
    pub task_id: u32,
    pub parent_digest: u64,
    pub feedback_digest: u64,
}

impl ContextKey {
    /// Context of a fresh attempt at the bare task.
    pub fn root(task_id: u32) -> Self {
        Self {
            task_id,
            parent_digest: 0,
            feedback_digest: 0,
        }
    }

    pub fn conditioned(task_id: u32, parent: &[Token], public_flags: &[bool]) -> Self {
        Self {
            task_id,
            parent_digest: digest_tokens(parent),
            feedback_digest: digest_flags(public_flags),
        }
    }
}

fn digest64(tag: &[u8], body: &[u8]) -> u64 {
    let mut h = Sha256::new();
    h.update(tag);
    h.update(body);
    let out = h.finalize();
    let mut word = [0u8; 8];
    word.copy_from_slice(&out[..8]);
    // 0 is reserved for "no parent" / "no feedback"
    u64::from_le_bytes(word).max(1)
}

/// Digest of a token sequence; 0 for the empty sequence.
pub fn digest_tokens(tokens: &[Token]) -> u64 {
    if tokens.is_empty() {
        return 0;
    }
    let bytes: Vec<u8> = tokens.iter().flat_map(|t| t.to_le_bytes()).collect();
    digest64(b"tokens", &bytes)
}

/// Digest of public pass/fail flags; 0 when no tests were run.
pub fn digest_flags(flags: &[bool]) -> u64 {
    if flags.is_empty() {
        return 0;
    }
    let bytes: Vec<u8> = flags.iter().map(|&f| f as u8).collect();
    digest64(b"flags", &bytes)
}

pub type TableKey = (ContextKey, usize);

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = logits.iter().map(|&z| z - max).collect();
    let lse = shifted.iter().map(|s| s.exp()).sum::<f64>().ln();
    shifted.into_iter().map(|s| s - lse).collect()
}

/// Sparse gradient over logit entries; absent keys are zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradient {
    entries: BTreeMap<TableKey, Vec<f64>>,
}

impl Gradient {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &TableKey) -> Option<&[f64]> {
        self.entries.get(key).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TableKey, &Vec<f64>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `self[key] += scale * delta`.
    pub fn add_scaled(&mut self, key: TableKey, delta: &[f64], scale: f64) {
        let slot = self
            .entries
            .entry(key)
            .or_insert_with(|| vec![0.0; delta.len()]);
        for (s, d) in slot.iter_mut().zip(delta) {
            *s += scale * d;
        }
    }

    pub fn merge_scaled(&mut self, other: &Gradient, scale: f64) {
        for (key, delta) in &other.entries {
            self.add_scaled(*key, delta, scale);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.entries
            .values()
            .flatten()
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    vocab: usize,
    max_len: usize,
    logits: BTreeMap<TableKey, Vec<f64>>,
}

impl PolicyParams {
    pub fn new(vocab: usize, max_len: usize) -> Result<Self> {
        if vocab == 0 || max_len == 0 {
            return Err(Error::Config(format!(
                "vocabulary ({vocab}) and max length ({max_len}) must be positive"
            )));
        }
        Ok(Self {
            vocab,
            max_len,
            logits: BTreeMap::new(),
        })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn entries(&self) -> impl Iterator<Item = (&TableKey, &Vec<f64>)> {
        self.logits.iter()
    }

    pub fn logits(&self, ctx: &ContextKey, position: usize) -> Vec<f64> {
        self.logits
            .get(&(*ctx, position))
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.vocab])
    }

    pub fn set_logits(&mut self, ctx: ContextKey, position: usize, logits: Vec<f64>) -> Result<()> {
        if logits.len() != self.vocab || logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::Validation(format!(
                "logit vector must have {} finite entries",
                self.vocab
            )));
        }
        if position >= self.max_len {
            return Err(Error::Domain(format!(
                "position {position} beyond max length {}",
                self.max_len
            )));
        }
        self.logits.insert((ctx, position), logits);
        Ok(())
    }

    fn check_position(&self, position: usize) -> Result<()> {
        if position >= self.max_len {
            Err(Error::Domain(format!(
                "prefix length {position} reaches max length {}",
                self.max_len
            )))
        } else {
            Ok(())
        }
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        if tokens.len() > self.max_len {
            return Err(Error::Domain(format!(
                "sequence length {} exceeds max length {}",
                tokens.len(),
                self.max_len
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= self.vocab) {
            return Err(Error::Validation(format!(
                "token {t} outside vocabulary of size {}",
                self.vocab
            )));
        }
        Ok(())
    }

    /// Log-probabilities of the next token after a prefix of length `position`.
    pub fn token_logprobs(&self, ctx: &ContextKey, position: usize) -> Result<Vec<f64>> {
        self.check_position(position)?;
        Ok(log_softmax(&self.logits(ctx, position)))
    }

    pub fn token_probs(&self, ctx: &ContextKey, position: usize) -> Result<Vec<f64>> {
        Ok(self
            .token_logprobs(ctx, position)?
            .into_iter()
            .map(f64::exp)
            .collect())
    }

    /// Per-token log-probabilities under teacher forcing.
    pub fn per_token_logprobs(&self, ctx: &ContextKey, tokens: &[Token]) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        tokens
            .iter()
            .enumerate()
            .map(|(pos, &tok)| Ok(self.token_logprobs(ctx, pos)?[tok as usize]))
            .collect()
    }

    pub fn sequence_logprob(&self, ctx: &ContextKey, tokens: &[Token]) -> Result<f64> {
        Ok(self.per_token_logprobs(ctx, tokens)?.iter().sum())
    }

    pub fn sample_sequence<R: Rng + ?Sized>(
        &self,
        ctx: &ContextKey,
        rng: &mut R,
        length: usize,
    ) -> Result<Vec<Token>> {
        if length > self.max_len {
            return Err(Error::Domain(format!(
                "requested length {length} exceeds max length {}",
                self.max_len
            )));
        }
        let mut out = Vec::with_capacity(length);
        for pos in 0..length {
            let probs = self.token_probs(ctx, pos)?;
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut chosen = probs.len() - 1;
            for (tok, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    chosen = tok;
                    break;
                }
            }
            out.push(chosen as Token);
        }
        Ok(out)
    }

    /// Gradient of `log pi(tokens | ctx)` w.r.t. the logits: at each position,
    /// `onehot(token) - softmax(logits)`.
    pub fn grad_sequence_logprob(&self, ctx: &ContextKey, tokens: &[Token]) -> Result<Gradient> {
        self.check_tokens(tokens)?;
        let mut grad = Gradient::new();
        for (pos, &tok) in tokens.iter().enumerate() {
            grad.add_scaled((*ctx, pos), &self.token_grad(ctx, pos, tok)?, 1.0);
        }
        Ok(grad)
    }

    /// `onehot(token) - softmax` at one position.
    pub fn token_grad(&self, ctx: &ContextKey, position: usize, token: Token) -> Result<Vec<f64>> {
        let mut g: Vec<f64> = self.token_probs(ctx, position)?.iter().map(|p| -p).collect();
        g[token as usize] += 1.0;
        Ok(g)
    }

    /// Gradient of `KL(self || reference)` at one position w.r.t. this
    /// policy's logits: `p_k (log p_k - log q_k - KL)`.
    pub fn kl_grad(&self, reference: &PolicyParams, ctx: &ContextKey, position: usize) -> Result<(f64, Vec<f64>)> {
        let lp = self.token_logprobs(ctx, position)?;
        let lq = reference.token_logprobs(ctx, position)?;
        let kl = exact_kl(self, reference, ctx, position)?;
        let g = lp
            .iter()
            .zip(&lq)
            .map(|(a, b)| a.exp() * (a - b - kl))
            .collect();
        Ok((kl, g))
    }

    /// `logits += step * grad`.
    pub fn apply(&mut self, grad: &Gradient, step: f64) {
        for (key, delta) in grad.iter() {
            let slot = self
                .logits
                .entry(*key)
                .or_insert_with(|| vec![0.0; delta.len()]);
            for (z, d) in slot.iter_mut().zip(delta) {
                *z += step * d;
            }
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            vocab: self.vocab,
            max_len: self.max_len,
            entries: self
                .logits
                .iter()
                .map(|((ctx, position), logits)| CheckpointEntry {
                    context: *ctx,
                    position: *position,
                    logits: logits.clone(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let mut params = Self::new(ck.vocab, ck.max_len)?;
        for e in ck.entries {
            params.set_logits(e.context, e.position, e.logits)?;
        }
        Ok(params)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_checkpoint()).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)
            .map_err(|e| Error::Validation(format!("bad checkpoint: {e}")))?;
        Self::from_checkpoint(ck)
    }

    /// Content hash of the logit table.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Serialized policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub vocab: usize,
    pub max_len: usize,
    pub entries: Vec<CheckpointEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointEntry {
    pub context: ContextKey,
    pub position: usize,
    pub logits: Vec<f64>,
}

/// `sum_v p_v (log p_v - log q_v)` at one position.
pub fn exact_kl(p: &PolicyParams, q: &PolicyParams, ctx: &ContextKey, position: usize) -> Result<f64> {
    if p.vocab != q.vocab {
        return Err(Error::Validation("KL between policies of different vocabularies".into()));
    }
    let lp = p.token_logprobs(ctx, position)?;
    let lq = q.token_logprobs(ctx, position)?;
    let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
    Ok(kl.max(0.0))
}

/// One agent: trainable parameters, the snapshot its samples were drawn
/// from, and the frozen reference.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentPolicy {
    params: PolicyParams,
    old_params: PolicyParams,
    ref_params: PolicyParams,
    /// Keys written since the last snapshot; `None` forces a full copy.
    dirty: Option<BTreeSet<TableKey>>,
}

impl AgentPolicy {
    pub fn new(initial: PolicyParams) -> Self {
        Self {
            old_params: initial.clone(),
            ref_params: initial.clone(),
            params: initial,
            dirty: Some(BTreeSet::new()),
        }
    }

    /// Starts from `params` with a separately supplied reference.
    pub fn with_reference(params: PolicyParams, reference: PolicyParams) -> Self {
        Self {
            old_params: params.clone(),
            params,
            ref_params: reference,
            dirty: Some(BTreeSet::new()),
        }
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    /// Direct write access. The next snapshot copies the whole table.
    pub fn params_mut(&mut self) -> &mut PolicyParams {
        self.dirty = None;
        &mut self.params
    }

    pub fn into_params(self) -> PolicyParams {
        self.params
    }

    /// `θ += step · grad` on the trainable parameters only.
    pub fn apply_update(&mut self, grad: &Gradient, step: f64) {
        if let Some(dirty) = self.dirty.as_mut() {
            dirty.extend(grad.iter().map(|(k, _)| *k));
        }
        self.params.apply(grad, step);
    }

    pub fn old_params(&self) -> &PolicyParams {
        &self.old_params
    }

    pub fn ref_params(&self) -> &PolicyParams {
        &self.ref_params
    }

    /// Takes the behaviour snapshot for the next rollout. Only entries
    /// written since the previous snapshot are copied.
    pub fn snapshot(&mut self) {
        match self.dirty.take() {
            Some(keys) => {
                for key in keys {
                    if let Some(z) = self.params.logits.get(&key) {
                        self.old_params.logits.insert(key, z.clone());
                    }
                }
            }
            None => self.old_params = self.params.clone(),
        }
        self.dirty = Some(BTreeSet::new());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn ctx() -> ContextKey {
        ContextKey::root(0)
    }

    #[test]
    fn uniform_when_untouched() {
        let p = PolicyParams::new(4, 3).unwrap();
        for lp in p.token_logprobs(&ctx(), 0).unwrap() {
            assert!((lp - 0.25f64.ln()).abs() < 1e-15);
        }
        assert!(matches!(p.token_logprobs(&ctx(), 3), Err(Error::Domain(_))));
    }

    #[test]
    fn shift_invariance_and_hand_softmax() {
        let mut p = PolicyParams::new(4, 1).unwrap();
        p.set_logits(ctx(), 0, vec![1.0; 4]).unwrap();
        let q = PolicyParams::new(4, 1).unwrap();
        assert_eq!(p.token_logprobs(&ctx(), 0).unwrap(), q.token_logprobs(&ctx(), 0).unwrap());

        p.set_logits(ctx(), 0, vec![2f64.ln(), 0.0, 0.0, 0.0]).unwrap();
        let probs = p.token_probs(&ctx(), 0).unwrap();
        for (got, want) in probs.iter().zip([0.4, 0.2, 0.2, 0.2]) {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn sequence_logprob_basics() {
        let p = PolicyParams::new(4, 3).unwrap();
        let lp = p.sequence_logprob(&ctx(), &[0, 1, 2]).unwrap();
        assert!((lp - 3.0 * 0.25f64.ln()).abs() < 1e-12);
        assert_eq!(p.sequence_logprob(&ctx(), &[]).unwrap(), 0.0);
        assert!(matches!(p.sequence_logprob(&ctx(), &[4]), Err(Error::Validation(_))));
    }

    #[test]
    fn degenerate_logits_sample_deterministically() {
        let mut p = PolicyParams::new(4, 5).unwrap();
        for pos in 0..5 {
            p.set_logits(ctx(), pos, vec![0.0, 0.0, 30.0, 0.0]).unwrap();
        }
        let s = p.sample_sequence(&ctx(), &mut stream(0, "s"), 5).unwrap();
        assert_eq!(s, vec![2; 5]);
    }

    #[test]
    fn seeded_sampling_repeats() {
        let p = PolicyParams::new(4, 6).unwrap();
        let a = p.sample_sequence(&ctx(), &mut stream(9, "s"), 6).unwrap();
        let b = p.sample_sequence(&ctx(), &mut stream(9, "s"), 6).unwrap();
        assert_eq!(a, b);
        assert!(p.sample_sequence(&ctx(), &mut stream(9, "s"), 7).is_err());
    }

    #[test]
    fn uniform_token_frequencies() {
        let p = PolicyParams::new(4, 1).unwrap();
        let mut rng = stream(11, "freq");
        let mut counts = [0usize; 4];
        for _ in 0..40_000 {
            counts[p.sample_sequence(&ctx(), &mut rng, 1).unwrap()[0] as usize] += 1;
        }
        for c in counts {
            assert!((c as f64 / 40_000.0 - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn gradient_is_onehot_minus_softmax() {
        let p = PolicyParams::new(4, 1).unwrap();
        let g = p.grad_sequence_logprob(&ctx(), &[0]).unwrap();
        assert_eq!(g.get(&(ctx(), 0)).unwrap(), &[0.75, -0.25, -0.25, -0.25]);
    }

    #[test]
    fn kl_examples() {
        let mut p = PolicyParams::new(2, 1).unwrap();
        let mut q = PolicyParams::new(2, 1).unwrap();
        assert_eq!(exact_kl(&p, &p, &ctx(), 0).unwrap(), 0.0);
        p.set_logits(ctx(), 0, vec![0.0, 0.0]).unwrap();
        // q = (0.25, 0.75)
        q.set_logits(ctx(), 0, vec![0.0, 3f64.ln()]).unwrap();
        let kl = exact_kl(&p, &q, &ctx(), 0).unwrap();
        let want = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl - want).abs() < 1e-12);
        assert!((kl - 0.14384).abs() < 1e-5);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut p = PolicyParams::new(3, 2).unwrap();
        p.set_logits(ContextKey::conditioned(4, &[1, 2], &[true]), 1, vec![0.1, -1.0 / 3.0, 1e-300])
            .unwrap();
        let back = PolicyParams::from_json(&p.to_json()).unwrap();
        assert_eq!(back, p);
        assert!(PolicyParams::from_json("{\"vocab\":2,\"max_len\":1,\"entries\":[{\"context\":{\"task_id\":0,\"parent_digest\":0,\"feedback_digest\":0},\"position\":0,\"logits\":[1.0]}]}").is_err());
    }

    #[test]
    fn snapshot_leaves_reference_alone() {
        let mut agent = AgentPolicy::new(PolicyParams::new(2, 1).unwrap());
        let ref_fp = agent.ref_params().fingerprint();
        let mut g = Gradient::new();
        g.add_scaled((ctx(), 0), &[1.0, -1.0], 1.0);
        agent.apply_update(&g, 0.5);
        assert_ne!(agent.old_params(), agent.params());
        agent.snapshot();
        assert_eq!(agent.old_params(), agent.params());
        agent.params_mut().set_logits(ctx(), 0, vec![3.0, -1.0]).unwrap();
        agent.snapshot();
        assert_eq!(agent.old_params(), agent.params());
        assert_eq!(agent.ref_params().fingerprint(), ref_fp);
    }

    #[test]
    fn digests_are_deterministic() {
        assert_eq!(digest_tokens(&[]), 0);
        assert_eq!(digest_flags(&[]), 0);
        assert_eq!(digest_tokens(&[1, 2]), digest_tokens(&[1, 2]));
        assert_ne!(digest_tokens(&[1, 2]), digest_tokens(&[2, 1]));
        assert_ne!(digest_flags(&[true, false]), digest_flags(&[false, true]));
    }
}
