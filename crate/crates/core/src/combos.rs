//! The experiment-combination matrix: which elements train in which stage.
//!
//! Each combination names an upstream learning method (MAML, multi-task, or
//! none for the direct fine-tuning baselines), the element set trained
//! upstream, and the single element kind tuned downstream. Abbreviations
//! follow the `<method>_<upstream letters>_<downstream letter>` scheme
//! (`Meta_M+P_P`, `Multi_MA_A`, `FT_P`) with element letters M, MA, MP, A, P
//! joined by `+` in canonical order.

use crate::elements::{ElementKind, ElementSet};
use crate::error::{ensure_contract, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Maml,
    Multitask,
    Ft,
}

impl Method {
    pub fn prefix(self) -> &'static str {
        match self {
            Method::Maml => "Meta",
            Method::Multitask => "Multi",
            Method::Ft => "FT",
        }
    }

    fn from_prefix(s: &str) -> Option<Method> {
        Some(match s {
            "Meta" => Method::Maml,
            "Multi" => Method::Multitask,
            "FT" => Method::Ft,
            _ => return None,
        })
    }
}

/// One row of the experiment matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Combination {
    pub method: Method,
    /// Elements trained in the upstream stage; empty for FT baselines.
    pub upstream: ElementSet,
    /// The single element kind tuned downstream ({Prompt} or {Adapter}).
    pub downstream: ElementSet,
    pub abbreviation: String,
}

impl Combination {
    fn new(method: Method, upstream: ElementSet, downstream: ElementSet) -> Result<Self> {
        validate_parts(method, &upstream, &downstream)?;
        let abbreviation = format_abbreviation(method, &upstream, &downstream);
        Ok(Combination { method, upstream, downstream, abbreviation })
    }

    /// Every element kind that must be attached to the model: the union of
    /// both stages' sets (each meta kind is only ever paired with its base
    /// kind downstream, validated at construction).
    pub fn required_attachments(&self) -> ElementSet {
        self.upstream.union(&self.downstream)
    }
}

impl std::fmt::Display for Combination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.abbreviation)
    }
}

fn validate_parts(method: Method, upstream: &ElementSet, downstream: &ElementSet) -> Result<()> {
    ensure_contract!(
        downstream.len() == 1 && downstream.is_subset_of(&ElementSet::downstream_allowed()),
        "downstream set {downstream} must be exactly one of prompt or adapter"
    );
    match method {
        Method::Ft => ensure_contract!(
            upstream.is_empty(),
            "FT baselines train nothing upstream, got {upstream}"
        ),
        _ => ensure_contract!(!upstream.is_empty(), "upstream-trained combination with empty set"),
    }
    // meta elements piggyback on their base element's insertion points
    let attached = upstream.union(downstream);
    if attached.contains(ElementKind::MetaAdapter) {
        ensure_contract!(
            attached.contains(ElementKind::Adapter),
            "meta-adapters require adapters to be attached"
        );
    }
    if attached.contains(ElementKind::MetaPrompt) {
        ensure_contract!(
            attached.contains(ElementKind::Prompt),
            "meta-prompts require a prompt to be attached"
        );
    }
    Ok(())
}

fn format_abbreviation(method: Method, upstream: &ElementSet, downstream: &ElementSet) -> String {
    let down = downstream.iter().next().expect("validated non-empty").letter();
    match method {
        Method::Ft => format!("FT_{down}"),
        _ => format!("{}_{}_{down}", method.prefix(), upstream),
    }
}

/// Parses an abbreviation back into a [`Combination`]; the inverse of the
/// `abbreviation` field for every enumerated row.
pub fn parse_abbreviation(s: &str) -> Result<Combination> {
    let parts: Vec<&str> = s.split('_').collect();
    let bad = || Error::input(format!("malformed combination abbreviation {s:?}"));
    let (method, upstream_part, down_part) = match parts.as_slice() {
        [prefix, down] => (Method::from_prefix(prefix).ok_or_else(bad)?, None, *down),
        [prefix, up, down] => (Method::from_prefix(prefix).ok_or_else(bad)?, Some(*up), *down),
        _ => return Err(bad()),
    };
    let upstream = match upstream_part {
        None => ElementSet::empty(),
        Some(up) => {
            let mut set = ElementSet::empty();
            for letter in up.split('+') {
                let kind = ElementKind::from_letter(letter).ok_or_else(bad)?;
                set.insert(kind);
            }
            set
        }
    };
    let down_kind = ElementKind::from_letter(down_part).ok_or_else(bad)?;
    let downstream = ElementSet::from_kinds(&[down_kind]);
    let combo = Combination::new(method, upstream, downstream)
        .map_err(|e| Error::input(format!("invalid combination {s:?}: {e}")))?;
    // canonical form only: reject letter orderings that don't round-trip
    ensure_contract!(combo.abbreviation == s, "non-canonical abbreviation {s:?}");
    Ok(combo)
}

/// The full experiment matrix: the 14 element selections under each of the
/// two upstream regimes, plus the two direct fine-tuning baselines.
pub fn enumerate_combinations() -> Vec<Combination> {
    use ElementKind::{Adapter, MetaAdapter, MetaPrompt, Plm, Prompt};
    let rows: [(&[ElementKind], ElementKind); 14] = [
        (&[Prompt], Prompt),
        (&[Adapter], Adapter),
        (&[Plm], Prompt),
        (&[Plm], Adapter),
        (&[Plm, Prompt], Prompt),
        (&[Plm, Adapter], Adapter),
        (&[MetaPrompt], Prompt),
        (&[MetaAdapter], Adapter),
        (&[MetaPrompt, Prompt], Prompt),
        (&[MetaAdapter, Adapter], Adapter),
        (&[Plm, Adapter, Prompt], Prompt),
        (&[Plm, Adapter, Prompt], Adapter),
        (&[Adapter, Prompt], Prompt),
        (&[Adapter, Prompt], Adapter),
    ];
    let mut out = Vec::with_capacity(30);
    for method in [Method::Maml, Method::Multitask] {
        for (upstream, down) in &rows {
            let combo = Combination::new(
                method,
                ElementSet::from_kinds(upstream),
                ElementSet::from_kinds(&[*down]),
            )
            .expect("table rows are valid");
            out.push(combo);
        }
    }
    for down in [Prompt, Adapter] {
        out.push(
            Combination::new(Method::Ft, ElementSet::empty(), ElementSet::from_kinds(&[down]))
                .expect("FT baselines are valid"),
        );
    }
    out
}

/// Looks up one combination by abbreviation among the enumerated rows.
pub fn find_combination(abbr: &str) -> Result<Combination> {
    enumerate_combinations()
        .into_iter()
        .find(|c| c.abbreviation == abbr)
        .ok_or_else(|| Error::input(format!("unknown combination {abbr:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// The canonical matrix order, frozen; `Multi_A+P_P` is the canonical
    /// spelling of the occasionally-seen `Multi_A+P+P` variant.
    const EXPECTED: [&str; 30] = [
        "Meta_P_P",
        "Meta_A_A",
        "Meta_M_P",
        "Meta_M_A",
        "Meta_M+P_P",
        "Meta_M+A_A",
        "Meta_MP_P",
        "Meta_MA_A",
        "Meta_MP+P_P",
        "Meta_MA+A_A",
        "Meta_M+A+P_P",
        "Meta_M+A+P_A",
        "Meta_A+P_P",
        "Meta_A+P_A",
        "Multi_P_P",
        "Multi_A_A",
        "Multi_M_P",
        "Multi_M_A",
        "Multi_M+P_P",
        "Multi_M+A_A",
        "Multi_MP_P",
        "Multi_MA_A",
        "Multi_MP+P_P",
        "Multi_MA+A_A",
        "Multi_M+A+P_P",
        "Multi_M+A+P_A",
        "Multi_A+P_P",
        "Multi_A+P_A",
        "FT_P",
        "FT_A",
    ];

    #[test]
    fn enumeration_matches_the_published_table_byte_for_byte() {
        let combos = enumerate_combinations();
        assert_eq!(combos.len(), 30);
        let abbrs: Vec<&str> = combos.iter().map(|c| c.abbreviation.as_str()).collect();
        assert_eq!(abbrs, EXPECTED);
        let upstream_trained = combos.iter().filter(|c| c.method != Method::Ft).count();
        assert_eq!(upstream_trained, 28);
    }

    #[test]
    fn meta_m_p_has_the_documented_partition() {
        let combo = find_combination("Meta_M_P").unwrap();
        assert_eq!(combo.method, Method::Maml);
        assert_eq!(combo.upstream, ElementSet::from_kinds(&[ElementKind::Plm]));
        assert_eq!(combo.downstream, ElementSet::from_kinds(&[ElementKind::Prompt]));
    }

    #[test]
    fn every_downstream_is_prompt_or_adapter_and_never_meta() {
        for combo in enumerate_combinations() {
            assert_eq!(combo.downstream.len(), 1, "{combo}");
            assert!(
                combo.downstream.is_subset_of(&ElementSet::downstream_allowed()),
                "{combo} tunes a non-downstream element downstream"
            );
        }
    }

    #[test]
    fn abbreviations_round_trip_through_parse() {
        for combo in enumerate_combinations() {
            let parsed = parse_abbreviation(&combo.abbreviation).unwrap();
            assert_eq!(parsed, combo);
        }
    }

    #[test]
    fn required_attachments_cover_meta_pairings() {
        let combo = find_combination("Meta_MA+A_A").unwrap();
        let attached = combo.required_attachments();
        assert!(attached.contains(ElementKind::MetaAdapter));
        assert!(attached.contains(ElementKind::Adapter));
        let combo = find_combination("Meta_MP_P").unwrap();
        let attached = combo.required_attachments();
        assert!(attached.contains(ElementKind::MetaPrompt));
        assert!(attached.contains(ElementKind::Prompt));
    }

    #[test]
    fn malformed_abbreviations_are_rejected() {
        for bad in ["", "Meta", "Meta_Z_P", "Multi_A+P+P", "FT_M", "Meta_M_X", "Boost_M_P", "Meta_P+M_P"] {
            assert!(parse_abbreviation(bad).is_err(), "{bad:?} should not parse");
        }
    }

    proptest! {
        #[test]
        fn parser_never_panics_on_arbitrary_input(s in ".{0,24}") {
            let _ = parse_abbreviation(&s);
        }

        #[test]
        fn parsed_strings_always_reformat_to_themselves(idx in 0usize..30) {
            let combos = enumerate_combinations();
            let combo = &combos[idx];
            let reparsed = parse_abbreviation(&combo.abbreviation).unwrap();
            prop_assert_eq!(&reparsed.abbreviation, &combo.abbreviation);
        }
    }
}
