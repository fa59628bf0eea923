//! Tunable elements and parameter partitioning.
//!
//! An *element* is a family of parameters that can be selected for training
//! while everything else stays frozen: the backbone itself (`Plm`), bias-style
//! adapters, soft prompts, and the meta variants that exist only during
//! upstream learning. Elements attach to a [`ParamStore`] under reserved name
//! prefixes and are applied inside the model's forward pass through the tape
//! functions here.
//!
//! Conventions:
//! - the regular adapter is the *bias* form: one scalar gate per token,
//!   `output[b,t,:] = hidden[b,t,:] + alpha(b,t) * v` with
//!   `alpha(b,t) = dot(alpha_weights, hidden[b,t,:])`; `v` starts at zero so
//!   an untrained adapter is exactly the identity;
//! - meta-adapters are bottleneck blocks (down-projection, ReLU,
//!   up-projection, residual) whose up-projection starts at zero — identity
//!   at initialization — and sit *before and after* each regular adapter;
//! - prompts are rows prepended to the encoder's embedded input in the order
//!   `[meta-prompt | prompt | input]`.

use rand::Rng;

use crate::error::{ensure_contract, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// The five element families a parameter can belong to.
///
/// The discriminant order is the canonical display order used in
/// combination abbreviations (`M+A+P`, `MA+A`, …).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ElementKind {
    /// The backbone model's own parameters.
    Plm,
    MetaAdapter,
    MetaPrompt,
    Adapter,
    Prompt,
}

impl ElementKind {
    pub const ALL: [ElementKind; 5] = [
        ElementKind::Plm,
        ElementKind::MetaAdapter,
        ElementKind::MetaPrompt,
        ElementKind::Adapter,
        ElementKind::Prompt,
    ];

    /// Abbreviation letter used in combination names.
    pub fn letter(self) -> &'static str {
        match self {
            ElementKind::Plm => "M",
            ElementKind::MetaAdapter => "MA",
            ElementKind::MetaPrompt => "MP",
            ElementKind::Adapter => "A",
            ElementKind::Prompt => "P",
        }
    }

    pub fn from_letter(s: &str) -> Option<ElementKind> {
        Some(match s {
            "M" => ElementKind::Plm,
            "MA" => ElementKind::MetaAdapter,
            "MP" => ElementKind::MetaPrompt,
            "A" => ElementKind::Adapter,
            "P" => ElementKind::Prompt,
            _ => return None,
        })
    }

    /// Inverse of `kind as u8` (checkpoint kind tags).
    pub fn from_u8(v: u8) -> Option<ElementKind> {
        ElementKind::ALL.get(v as usize).copied()
    }

    fn bit(self) -> u8 {
        1 << self as u8
    }
}

impl std::fmt::Display for ElementKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.letter())
    }
}

/// Small set of [`ElementKind`]s.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ElementSet(u8);

impl ElementSet {
    pub fn empty() -> Self {
        ElementSet(0)
    }

    pub fn from_kinds(kinds: &[ElementKind]) -> Self {
        let mut s = ElementSet(0);
        for &k in kinds {
            s.insert(k);
        }
        s
    }

    /// The kinds a downstream stage may tune: adapters and prompts only.
    pub fn downstream_allowed() -> Self {
        ElementSet::from_kinds(&[ElementKind::Adapter, ElementKind::Prompt])
    }

    pub fn insert(&mut self, kind: ElementKind) {
        self.0 |= kind.bit();
    }

    pub fn contains(&self, kind: ElementKind) -> bool {
        self.0 & kind.bit() != 0
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn union(&self, other: &ElementSet) -> ElementSet {
        ElementSet(self.0 | other.0)
    }

    pub fn is_subset_of(&self, other: &ElementSet) -> bool {
        self.0 & !other.0 == 0
    }

    /// Kinds in canonical order.
    pub fn iter(&self) -> impl Iterator<Item = ElementKind> + '_ {
        ElementKind::ALL.into_iter().filter(|k| self.contains(*k))
    }
}

impl std::fmt::Display for ElementSet {
    /// Letters joined by `+` in canonical order; empty set renders as `-`.
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_empty() {
            return f.write_str("-");
        }
        let parts: Vec<&str> = self.iter().map(|k| k.letter()).collect();
        f.write_str(&parts.join("+"))
    }
}

/// Splits a store's parameter names into `(tunable, frozen)` by kind.
///
/// Every parameter lands in exactly one half. Asking for a kind that has no
/// attached parameters is a contract violation — it would silently train
/// nothing.
pub fn partition_parameters(
    store: &ParamStore,
    set: &ElementSet,
) -> Result<(Vec<String>, Vec<String>)> {
    let attached = store.attached_kinds();
    for kind in set.iter() {
        ensure_contract!(
            attached.contains(kind),
            "element {kind} selected for tuning but never attached"
        );
    }
    let mut tunable = Vec::new();
    let mut frozen = Vec::new();
    for p in store.iter() {
        if set.contains(p.kind) {
            tunable.push(p.name.clone());
        } else {
            frozen.push(p.name.clone());
        }
    }
    Ok((tunable, frozen))
}

// ---- initialization ----

/// One standard-normal draw (Box–Muller), deterministic for a seeded rng.
pub(crate) fn gauss<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub(crate) fn gauss_vec<R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| gauss(rng) * std).collect()
}

/// Init scale for embedding-like parameters (token, position, prompts,
/// adapter gates).
pub const EMBED_INIT_STD: f64 = 0.02;

/// Adds a soft prompt `[len, d_model]` under `prompt.embed`.
pub fn attach_prompt<R: Rng>(
    store: &mut ParamStore,
    len: usize,
    d_model: usize,
    rng: &mut R,
) -> Result<()> {
    ensure_contract!(len > 0, "prompt length must be positive");
    store.add(
        "prompt.embed",
        ElementKind::Prompt,
        Tensor::new(vec![len, d_model], gauss_vec(rng, len * d_model, EMBED_INIT_STD), false)?,
    )
}

/// Adds a meta-prompt `[len, d_model]` under `meta_prompt.embed`. Requires a
/// regular prompt to already be attached — a meta-prompt only ever rides in
/// front of one.
pub fn attach_meta_prompt<R: Rng>(
    store: &mut ParamStore,
    len: usize,
    d_model: usize,
    rng: &mut R,
) -> Result<()> {
    ensure_contract!(len > 0, "meta-prompt length must be positive");
    ensure_contract!(
        store.attached_kinds().contains(ElementKind::Prompt),
        "meta-prompt requires a regular prompt to be attached first"
    );
    store.add(
        "meta_prompt.embed",
        ElementKind::MetaPrompt,
        Tensor::new(vec![len, d_model], gauss_vec(rng, len * d_model, EMBED_INIT_STD), false)?,
    )
}

/// Adds one bias adapter per insertion point (`adapter.layer{i}.*`). The
/// shift vector `v` starts at zero, so a fresh adapter is the identity.
pub fn attach_adapter_bias<R: Rng>(
    store: &mut ParamStore,
    n_points: usize,
    d_model: usize,
    rng: &mut R,
) -> Result<()> {
    ensure_contract!(n_points > 0, "adapter needs at least one insertion point");
    for i in 0..n_points {
        store.add(
            format!("adapter.layer{i}.v"),
            ElementKind::Adapter,
            Tensor::zeros(vec![d_model], false),
        )?;
        store.add(
            format!("adapter.layer{i}.alpha.weight"),
            ElementKind::Adapter,
            Tensor::new(vec![d_model], gauss_vec(rng, d_model, EMBED_INIT_STD), false)?,
        )?;
    }
    Ok(())
}

/// Adds bottleneck meta-adapters before and after every regular adapter
/// (`meta_adapter.layer{i}.pre.*` / `.post.*`). Up-projections start at
/// zero, so fresh meta-adapters are the identity. Regular adapters must be
/// attached first.
pub fn attach_meta_adapters<R: Rng>(
    store: &mut ParamStore,
    n_points: usize,
    d_model: usize,
    bottleneck: usize,
    rng: &mut R,
) -> Result<()> {
    ensure_contract!(
        store.attached_kinds().contains(ElementKind::Adapter),
        "meta-adapters wrap regular adapters; attach adapters first"
    );
    ensure_contract!(bottleneck > 0, "bottleneck width must be positive");
    for i in 0..n_points {
        for pos in ["pre", "post"] {
            let std = (2.0 / (d_model + bottleneck) as f64).sqrt();
            store.add(
                format!("meta_adapter.layer{i}.{pos}.down.weight"),
                ElementKind::MetaAdapter,
                Tensor::new(
                    vec![d_model, bottleneck],
                    gauss_vec(rng, d_model * bottleneck, std),
                    false,
                )?,
            )?;
            store.add(
                format!("meta_adapter.layer{i}.{pos}.down.bias"),
                ElementKind::MetaAdapter,
                Tensor::zeros(vec![bottleneck], false),
            )?;
            store.add(
                format!("meta_adapter.layer{i}.{pos}.up.weight"),
                ElementKind::MetaAdapter,
                Tensor::zeros(vec![bottleneck, d_model], false),
            )?;
            store.add(
                format!("meta_adapter.layer{i}.{pos}.up.bias"),
                ElementKind::MetaAdapter,
                Tensor::zeros(vec![d_model], false),
            )?;
        }
    }
    Ok(())
}

// ---- forward application ----

/// Bias adapter: `hidden + alpha ⊗ v` where `alpha[b,t] = hidden[b,t,:] · w`.
pub fn adapter_bias_apply(
    tape: &mut Tape,
    hidden: TensorId,
    v: TensorId,
    alpha_weights: TensorId,
) -> Result<TensorId> {
    let shape = tape.shape(hidden).to_vec();
    ensure_contract!(shape.len() == 3, "adapter expects [batch, seq, d] hidden, got {:?}", shape);
    let (b, s, d) = (shape[0], shape[1], shape[2]);
    let h2 = tape.reshape(hidden, vec![b * s, d])?;
    let w_col = tape.reshape(alpha_weights, vec![d, 1])?;
    let alpha = tape.matmul(h2, w_col)?; // [b*s, 1]
    let v_row = tape.reshape(v, vec![1, d])?;
    let shift = tape.matmul(alpha, v_row)?; // outer product, [b*s, d]
    let out = tape.add(h2, shift)?;
    tape.reshape(out, vec![b, s, d])
}

/// Bottleneck block: `hidden + up(relu(down(hidden)))`.
pub fn bottleneck_apply(
    tape: &mut Tape,
    hidden: TensorId,
    down_w: TensorId,
    down_b: TensorId,
    up_w: TensorId,
    up_b: TensorId,
) -> Result<TensorId> {
    let shape = tape.shape(hidden).to_vec();
    ensure_contract!(shape.len() == 3, "bottleneck expects [batch, seq, d] hidden, got {:?}", shape);
    let (b, s, d) = (shape[0], shape[1], shape[2]);
    let h2 = tape.reshape(hidden, vec![b * s, d])?;
    let z = tape.matmul(h2, down_w)?;
    let z = tape.add(z, down_b)?;
    let z = tape.relu(z)?;
    let u = tape.matmul(z, up_w)?;
    let u = tape.add(u, up_b)?;
    let out = tape.add(h2, u)?;
    tape.reshape(out, vec![b, s, d])
}

/// Prepends prompt rows to embedded input in `[meta | prompt | input]`
/// order, broadcasting each prompt over the batch. Returns the extended
/// sequence and the number of prepended positions.
pub fn build_prompt_input(
    tape: &mut Tape,
    input_embed: TensorId,
    meta_prompt: Option<TensorId>,
    prompt: Option<TensorId>,
) -> Result<(TensorId, usize)> {
    let shape = tape.shape(input_embed).to_vec();
    ensure_contract!(shape.len() == 3, "prompt prepend expects [batch, seq, d] input, got {:?}", shape);
    let b = shape[0];
    let mut out = input_embed;
    let mut added = 0;
    // Prepend the regular prompt first, then the meta-prompt in front of it.
    for p in [prompt, meta_prompt].into_iter().flatten() {
        let pshape = tape.shape(p).to_vec();
        ensure_contract!(
            pshape.len() == 2 && pshape[1] == shape[2],
            "prompt rows must be [len, {}], got {:?}",
            shape[2],
            pshape
        );
        let tiled = tape.repeat(p, b)?;
        out = tape.concat(tiled, out, 1)?;
        added += pshape[0];
    }
    Ok((out, added))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adapter_bias_matches_worked_example() {
        // hidden [1,1,2] = [1,2]; alpha weights [1,0] so alpha = 1;
        // v = [0.5,-0.5] gives [1.5, 1.5].
        let mut tape = Tape::new();
        let h = tape.constant(vec![1, 1, 2], vec![1.0, 2.0]).unwrap();
        let v = tape.constant(vec![2], vec![0.5, -0.5]).unwrap();
        let w = tape.constant(vec![2], vec![1.0, 0.0]).unwrap();
        let out = adapter_bias_apply(&mut tape, h, v, w).unwrap();
        assert_eq!(tape.data(out), &[1.5, 1.5]);
    }

    #[test]
    fn zero_v_adapter_is_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hidden = gauss_vec(&mut rng, 2 * 3 * 4, 1.0);
        let alpha = gauss_vec(&mut rng, 4, 0.5);
        let mut tape = Tape::new();
        let h = tape.constant(vec![2, 3, 4], hidden.clone()).unwrap();
        let v = tape.constant(vec![4], vec![0.0; 4]).unwrap();
        let w = tape.constant(vec![4], alpha).unwrap();
        let out = adapter_bias_apply(&mut tape, h, v, w).unwrap();
        assert_eq!(tape.data(out), &hidden[..]);
    }

    #[test]
    fn zero_up_projection_bottleneck_is_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let hidden = gauss_vec(&mut rng, 2 * 2 * 4, 1.0);
        let down_w = gauss_vec(&mut rng, 4 * 3, 0.3);
        let mut tape = Tape::new();
        let h = tape.constant(vec![2, 2, 4], hidden.clone()).unwrap();
        let dw = tape.constant(vec![4, 3], down_w).unwrap();
        let db = tape.constant(vec![3], vec![0.1, -0.2, 0.3]).unwrap();
        let uw = tape.constant(vec![3, 4], vec![0.0; 12]).unwrap();
        let ub = tape.constant(vec![4], vec![0.0; 4]).unwrap();
        let out = bottleneck_apply(&mut tape, h, dw, db, uw, ub).unwrap();
        assert_eq!(tape.data(out), &hidden[..]);
    }

    #[test]
    fn prompt_prepend_orders_meta_prompt_input() {
        let mut tape = Tape::new();
        // batch 2, seq 1, d 2; distinct fills identify each block.
        let input = tape.constant(vec![2, 1, 2], vec![3.0; 4]).unwrap();
        let prompt = tape.constant(vec![2, 2], vec![2.0; 4]).unwrap();
        let meta = tape.constant(vec![1, 2], vec![1.0; 2]).unwrap();
        let (out, added) = build_prompt_input(&mut tape, input, Some(meta), Some(prompt)).unwrap();
        assert_eq!(added, 3);
        assert_eq!(tape.shape(out), &[2, 4, 2]);
        let d = tape.data(out);
        // per batch row: meta(1) | prompt(2) | input(1)
        for b in 0..2 {
            let row = &d[b * 8..(b + 1) * 8];
            assert_eq!(row, &[1.0, 1.0, 2.0, 2.0, 2.0, 2.0, 3.0, 3.0]);
        }
    }

    #[test]
    fn no_prompts_is_passthrough() {
        let mut tape = Tape::new();
        let input = tape.constant(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (out, added) = build_prompt_input(&mut tape, input, None, None).unwrap();
        assert_eq!(added, 0);
        assert_eq!(tape.data(out), tape.data(input));
    }

    #[test]
    fn partition_covers_every_parameter_exactly_once() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        store
            .add("backbone.w", ElementKind::Plm, Tensor::zeros(vec![4], false))
            .unwrap();
        attach_prompt(&mut store, 3, 2, &mut rng).unwrap();
        attach_adapter_bias(&mut store, 2, 2, &mut rng).unwrap();

        let set = ElementSet::from_kinds(&[ElementKind::Prompt]);
        let (tunable, frozen) = partition_parameters(&store, &set).unwrap();
        assert_eq!(tunable, vec!["prompt.embed".to_string()]);
        assert_eq!(tunable.len() + frozen.len(), store.len());
        for name in &tunable {
            assert!(!frozen.contains(name));
        }
    }

    #[test]
    fn prompt_only_partition_counts_len_times_d() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        store
            .add("backbone.w", ElementKind::Plm, Tensor::zeros(vec![10], false))
            .unwrap();
        attach_prompt(&mut store, 16, 32, &mut rng).unwrap();
        let set = ElementSet::from_kinds(&[ElementKind::Prompt]);
        let (tunable, _) = partition_parameters(&store, &set).unwrap();
        let n: usize = tunable
            .iter()
            .map(|name| store.get(name).unwrap().value.numel())
            .sum();
        assert_eq!(n, 16 * 32);
    }

    #[test]
    fn partition_of_unattached_kind_is_contract_violation() {
        let mut store = ParamStore::new();
        store
            .add("backbone.w", ElementKind::Plm, Tensor::zeros(vec![4], false))
            .unwrap();
        let set = ElementSet::from_kinds(&[ElementKind::Adapter]);
        assert!(matches!(
            partition_parameters(&store, &set),
            Err(crate::Error::Contract(_))
        ));
    }

    #[test]
    fn meta_adapters_require_regular_adapters() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let err = attach_meta_adapters(&mut store, 2, 4, 2, &mut rng);
        assert!(matches!(err, Err(crate::Error::Contract(_))));
        attach_adapter_bias(&mut store, 2, 4, &mut rng).unwrap();
        attach_meta_adapters(&mut store, 2, 4, 2, &mut rng).unwrap();
        // two meta-adapters per insertion point
        let metas = store
            .iter()
            .filter(|p| p.kind == ElementKind::MetaAdapter)
            .count();
        assert_eq!(metas, 2 * 2 * 4); // points x {pre,post} x 4 tensors each
    }

    #[test]
    fn element_set_formats_in_canonical_order() {
        let set = ElementSet::from_kinds(&[
            ElementKind::Prompt,
            ElementKind::Plm,
            ElementKind::Adapter,
        ]);
        assert_eq!(set.to_string(), "M+A+P");
        assert_eq!(ElementSet::empty().to_string(), "-");
        let metas = ElementSet::from_kinds(&[ElementKind::Adapter, ElementKind::MetaAdapter]);
        assert_eq!(metas.to_string(), "MA+A");
    }
}
