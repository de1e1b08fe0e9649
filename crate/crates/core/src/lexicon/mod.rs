//! Class catalogs, prompt templates and lexical neighborhoods.
//!
//! Lexical relations come from a tab-separated snapshot, one
//! `class_name<TAB>relation<TAB>noun` triple per line. Lines whose class name
//! is `*` contribute to a global noun pool. A built-in mock lexicon with the
//! same format backs the tests and the shipped desk-scale configs.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::{NounKind, RegisteredNoun};
use crate::error::{Error, Result};

pub const MOCK_LEXICON_TSV: &str = include_str!("../../data/mock_lexicon.tsv");
pub const MOCK_CLASSES: &str = include_str!("../../data/mock_classes.txt");

pub const DEFAULT_TEMPLATE: &str = "a photo of a {}";
pub const DEFAULT_PER_CLASS_LIMIT: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LexiconSource {
    WordnetLive,
    OfflineSnapshot,
    MockLexicon,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relation {
    Synonym,
    Hypernym,
    Hyponym,
    Sibling,
    Related,
    Global,
}

impl Relation {
    /// Harvest order when a per-class limit truncates the neighborhood.
    fn priority(self) -> u8 {
        match self {
            Relation::Synonym => 0,
            Relation::Hypernym => 1,
            Relation::Hyponym => 2,
            Relation::Sibling => 3,
            Relation::Related => 4,
            Relation::Global => 5,
        }
    }
}

impl FromStr for Relation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_lowercase().as_str() {
            "synonym" => Relation::Synonym,
            "hypernym" => Relation::Hypernym,
            "hyponym" => Relation::Hyponym,
            "sibling" => Relation::Sibling,
            "related" => Relation::Related,
            "global" => Relation::Global,
            other => return Err(Error::Config(format!("unknown relation '{other}'"))),
        })
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Relation::Synonym => "synonym",
            Relation::Hypernym => "hypernym",
            Relation::Hyponym => "hyponym",
            Relation::Sibling => "sibling",
            Relation::Related => "related",
            Relation::Global => "global",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexEntry {
    pub class_name: String,
    pub relation: Relation,
    pub noun: String,
}

/// Parsed lexical snapshot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    pub source: LexiconSource,
    pub entries: Vec<LexEntry>,
}

impl Lexicon {
    pub fn parse(text: &str, source: LexiconSource) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return Err(Error::Config(format!(
                    "snapshot line {}: expected 3 tab-separated fields, found {}",
                    lineno + 1,
                    parts.len()
                )));
            }
            let noun = parts[2].trim().to_lowercase();
            if noun.is_empty() {
                return Err(Error::Config(format!("snapshot line {}: empty noun", lineno + 1)));
            }
            entries.push(LexEntry {
                class_name: parts[0].trim().to_lowercase(),
                relation: parts[1].parse()?,
                noun,
            });
        }
        Ok(Self { source, entries })
    }

    pub fn mock() -> Self {
        Self::parse(MOCK_LEXICON_TSV, LexiconSource::MockLexicon).expect("built-in lexicon parses")
    }

    pub fn load(source: LexiconSource, path: Option<&Path>) -> Result<Self> {
        match source {
            LexiconSource::MockLexicon => Ok(Self::mock()),
            LexiconSource::OfflineSnapshot => {
                let path = path.ok_or_else(|| {
                    Error::Config("offline-snapshot source requires a snapshot path".into())
                })?;
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                Self::parse(&text, source)
            }
            LexiconSource::WordnetLive => Err(Error::BackendUnavailable {
                backend: "wordnet-live".into(),
                reason: "live lexical database access is not available; export an offline snapshot"
                    .into(),
            }),
        }
    }

    fn has_class(&self, name: &str) -> bool {
        self.entries.iter().any(|e| e.class_name == name)
    }

    /// Encoder registry: every catalog class name plus every noun attached to
    /// a catalog class. `related` nouns register as distractors.
    pub fn mock_registry(&self, catalog: &ClassCatalog) -> Vec<RegisteredNoun> {
        let mut out: Vec<RegisteredNoun> = catalog
            .names()
            .enumerate()
            .map(|(i, name)| RegisteredNoun {
                noun: name.to_lowercase(),
                class_index: i,
                kind: NounKind::Core,
            })
            .collect();
        for e in &self.entries {
            if let Some(idx) = catalog.index_of(&e.class_name) {
                let kind = if e.relation == Relation::Related {
                    NounKind::Distractor
                } else {
                    NounKind::Core
                };
                out.push(RegisteredNoun {
                    noun: e.noun.clone(),
                    class_index: idx,
                    kind,
                });
            }
        }
        out
    }
}

/// Ordered label space; ids run 1..=C in file order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCatalog {
    names: Vec<String>,
}

impl ClassCatalog {
    pub fn from_names<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(|s| s.into().trim().to_string()).collect();
        if names.is_empty() {
            return Err(Error::Config("class catalog is empty".into()));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if n.is_empty() {
                return Err(Error::Config("class catalog contains an empty name".into()));
            }
            if !seen.insert(n.to_lowercase()) {
                return Err(Error::Config(format!("duplicate class name '{n}'")));
            }
        }
        Ok(Self { names })
    }

    /// One class name per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_names(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn mock() -> Self {
        Self::parse(MOCK_CLASSES).expect("built-in catalog parses")
    }

    /// First `n` classes of the built-in catalog.
    pub fn mock_prefix(n: usize) -> Result<Self> {
        let all = Self::mock();
        if n == 0 || n > all.len() {
            return Err(Error::Config(format!(
                "mock catalog has {} classes, requested {n}",
                all.len()
            )));
        }
        Self::from_names(all.names.into_iter().take(n))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    /// Name for a 0-based class index.
    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    /// External 1-based class id for a 0-based index.
    pub fn id(&self, index: usize) -> usize {
        index + 1
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        let lowered = name.to_lowercase();
        self.names.iter().position(|n| n.to_lowercase() == lowered)
    }

    pub fn contains_name(&self, noun: &str) -> bool {
        self.index_of(noun).is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NounCandidateSet {
    pub nouns: Vec<String>,
    pub source: LexiconSource,
}

impl NounCandidateSet {
    pub fn len(&self) -> usize {
        self.nouns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nouns.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidateScope {
    /// Each class's own neighborhood, truncated to the per-class limit.
    PerClass,
    /// Every noun the snapshot holds.
    FullVocabulary,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HarvestReport {
    /// (class, nouns contributed after exclusion and truncation)
    pub per_class: Vec<(String, usize)>,
    /// (missing class, lexicon class whose hypernyms were used instead)
    pub fallbacks: Vec<(String, String)>,
    pub skipped: Vec<String>,
    pub excluded_class_names: usize,
}

/// Collects relaxed nouns for every class, never returning a class name.
pub fn harvest_candidates(
    catalog: &ClassCatalog,
    lexicon: &Lexicon,
    per_class_limit: usize,
    scope: CandidateScope,
) -> Result<(NounCandidateSet, HarvestReport)> {
    let mut report = HarvestReport::default();
    let mut seen: HashSet<String> = HashSet::new();
    let mut nouns = Vec::new();
    let push = |noun: &str, seen: &mut HashSet<String>, nouns: &mut Vec<String>| {
        if seen.insert(noun.to_string()) {
            nouns.push(noun.to_string());
        }
    };

    match scope {
        CandidateScope::FullVocabulary => {
            for e in &lexicon.entries {
                if catalog.contains_name(&e.noun) {
                    report.excluded_class_names += 1;
                    continue;
                }
                push(&e.noun, &mut seen, &mut nouns);
            }
        }
        CandidateScope::PerClass => {
            for name in catalog.names() {
                let lowered = name.to_lowercase();
                let mut rows: Vec<&LexEntry> = if lexicon.has_class(&lowered) {
                    lexicon
                        .entries
                        .iter()
                        .filter(|e| e.class_name == lowered)
                        .collect()
                } else if let Some(sense) = nearest_sense(lexicon, &lowered) {
                    log::warn!("class '{name}' absent from lexicon; using hypernyms of '{sense}'");
                    report.fallbacks.push((name.to_string(), sense.clone()));
                    lexicon
                        .entries
                        .iter()
                        .filter(|e| e.class_name == sense && e.relation == Relation::Hypernym)
                        .collect()
                } else {
                    log::warn!("class '{name}' absent from lexicon; skipped");
                    report.skipped.push(name.to_string());
                    continue;
                };
                rows.sort_by_key(|e| e.relation.priority());
                let mut taken = 0;
                for e in rows {
                    if taken >= per_class_limit {
                        break;
                    }
                    if catalog.contains_name(&e.noun) {
                        report.excluded_class_names += 1;
                        continue;
                    }
                    taken += 1;
                    push(&e.noun, &mut seen, &mut nouns);
                }
                report.per_class.push((name.to_string(), taken));
            }
            if per_class_limit > 0 {
                for e in lexicon.entries.iter().filter(|e| e.class_name == "*") {
                    if catalog.contains_name(&e.noun) {
                        report.excluded_class_names += 1;
                        continue;
                    }
                    push(&e.noun, &mut seen, &mut nouns);
                }
            }
        }
    }

    if nouns.is_empty() {
        return Err(Error::NoCandidates(format!(
            "no candidate nouns for {} classes (per-class limit {per_class_limit})",
            catalog.len()
        )));
    }
    Ok((
        NounCandidateSet {
            nouns,
            source: lexicon.source,
        },
        report,
    ))
}

/// A lexicon class sharing the missing class's head (last) word.
fn nearest_sense(lexicon: &Lexicon, class_name: &str) -> Option<String> {
    let head = class_name.split_whitespace().last()?;
    let mut candidates: Vec<&str> = lexicon
        .entries
        .iter()
        .filter(|e| e.class_name != "*")
        .map(|e| e.class_name.as_str())
        .filter(|c| c.split_whitespace().last() == Some(head))
        .collect();
    candidates.sort();
    candidates.dedup();
    candidates.first().map(|s| s.to_string())
}

/// Prompt templates, each holding exactly one `{}` noun slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct PromptTemplateSet {
    templates: Vec<String>,
}

impl PromptTemplateSet {
    pub fn new<I, S>(templates: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let templates: Vec<String> = templates.into_iter().map(Into::into).collect();
        if templates.is_empty() {
            return Err(Error::Config("at least one prompt template is required".into()));
        }
        for t in &templates {
            let slots = t.matches("{}").count();
            if slots != 1 {
                return Err(Error::Config(format!(
                    "template '{t}' must contain exactly one '{{}}' slot, found {slots}"
                )));
            }
        }
        Ok(Self { templates })
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn apply(&self, noun: &str) -> Result<Vec<String>> {
        apply_templates(self, noun)
    }
}

impl Default for PromptTemplateSet {
    fn default() -> Self {
        Self {
            templates: vec![DEFAULT_TEMPLATE.to_string()],
        }
    }
}

impl TryFrom<Vec<String>> for PromptTemplateSet {
    type Error = Error;

    fn try_from(v: Vec<String>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<PromptTemplateSet> for Vec<String> {
    fn from(t: PromptTemplateSet) -> Self {
        t.templates
    }
}

/// One prompt per template, in template order.
pub fn apply_templates(templates: &PromptTemplateSet, noun: &str) -> Result<Vec<String>> {
    let noun = noun.trim();
    if noun.is_empty() {
        return Err(Error::Input("noun must be non-empty".into()));
    }
    Ok(templates
        .templates
        .iter()
        .map(|t| t.replacen("{}", noun, 1))
        .collect())
}

/// A seeded permutation of class names. `perm[c]` is the index of the name
/// shown for class `c`; identity positions are allowed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPermutation {
    pub seed: u64,
    pub perm: Vec<usize>,
    pub fixed_points: usize,
}

impl ClassPermutation {
    pub fn apply(&self, class_index: usize) -> usize {
        self.perm[class_index]
    }

    /// class id (1-based) → displayed class name.
    pub fn mapping<'a>(&self, catalog: &'a ClassCatalog) -> Vec<(usize, &'a str)> {
        self.perm
            .iter()
            .enumerate()
            .map(|(c, &p)| (catalog.id(c), catalog.name(p)))
            .collect()
    }
}

/// Uniform random permutation of class names fixed by `seed`.
pub fn shuffle_class_names(catalog: &ClassCatalog, seed: u64) -> Result<ClassPermutation> {
    permutation(catalog.len(), seed)
}

pub(crate) fn permutation(num_classes: usize, seed: u64) -> Result<ClassPermutation> {
    if num_classes < 2 {
        return Err(Error::Input(format!(
            "shuffling class names needs at least 2 classes, got {num_classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..num_classes).collect();
    perm.shuffle(&mut rng);
    let fixed_points = perm.iter().enumerate().filter(|(i, &p)| *i == p).count();
    log::trace!("class-name permutation seed={seed} perm={perm:?} fixed_points={fixed_points}");
    Ok(ClassPermutation {
        seed,
        perm,
        fixed_points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mock_harvest_for_telephone() {
        let catalog = ClassCatalog::from_names(["telephone"]).unwrap();
        let (set, report) = harvest_candidates(
            &catalog,
            &Lexicon::mock(),
            DEFAULT_PER_CLASS_LIMIT,
            CandidateScope::PerClass,
        )
        .unwrap();
        assert!(set.nouns.contains(&"desk phone".to_string()));
        assert!(set.nouns.contains(&"handset".to_string()));
        assert!(!set.nouns.contains(&"telephone".to_string()));
        assert_eq!(set.source, LexiconSource::MockLexicon);
        assert!(report.skipped.is_empty());
    }

    #[test]
    fn zero_limit_has_no_candidates() {
        let catalog = ClassCatalog::mock();
        let err = harvest_candidates(&catalog, &Lexicon::mock(), 0, CandidateScope::PerClass);
        assert!(matches!(err, Err(Error::NoCandidates(_))));
    }

    #[test]
    fn class_names_are_excluded_even_when_listed_for_other_classes() {
        let lex = Lexicon::parse(
            "cat\tsibling\tdog\ncat\tsynonym\tfeline\ndog\tsynonym\tpooch\n",
            LexiconSource::OfflineSnapshot,
        )
        .unwrap();
        let catalog = ClassCatalog::from_names(["cat", "dog"]).unwrap();
        let (set, report) =
            harvest_candidates(&catalog, &lex, 20, CandidateScope::PerClass).unwrap();
        assert_eq!(set.nouns, vec!["feline", "pooch"]);
        assert_eq!(report.excluded_class_names, 1);
        let (full, _) =
            harvest_candidates(&catalog, &lex, 20, CandidateScope::FullVocabulary).unwrap();
        assert_eq!(full.nouns, vec!["feline", "pooch"]);
    }

    #[test]
    fn missing_class_falls_back_or_is_skipped() {
        let lex = Lexicon::parse(
            "cat\thypernym\tfeline\ncat\tsynonym\tmoggy\n",
            LexiconSource::OfflineSnapshot,
        )
        .unwrap();
        let catalog = ClassCatalog::from_names(["tabby cat", "zebra", "cat"]).unwrap();
        let (set, report) =
            harvest_candidates(&catalog, &lex, 20, CandidateScope::PerClass).unwrap();
        assert_eq!(report.fallbacks, vec![("tabby cat".to_string(), "cat".to_string())]);
        assert_eq!(report.skipped, vec!["zebra".to_string()]);
        assert_eq!(set.nouns, vec!["feline", "moggy"]);
    }

    #[test]
    fn per_class_limit_prefers_synonyms() {
        let catalog = ClassCatalog::from_names(["dog"]).unwrap();
        let (set, _) =
            harvest_candidates(&catalog, &Lexicon::mock(), 2, CandidateScope::PerClass).unwrap();
        // two per class, then the global pool
        assert_eq!(
            set.nouns,
            vec!["domestic dog", "canis familiaris", "object", "thing", "scene"]
        );
    }

    #[test]
    fn wordnet_live_is_unavailable_offline() {
        assert!(matches!(
            Lexicon::load(LexiconSource::WordnetLive, None),
            Err(Error::BackendUnavailable { .. })
        ));
    }

    #[test]
    fn templates_apply_in_order() {
        let t = PromptTemplateSet::new(["a photo of a {}"]).unwrap();
        assert_eq!(apply_templates(&t, "handset").unwrap(), vec!["a photo of a handset"]);
        let t3 = PromptTemplateSet::new(["a {}", "the {}", "{} in the wild"]).unwrap();
        assert_eq!(
            t3.apply("oak").unwrap(),
            vec!["a oak", "the oak", "oak in the wild"]
        );
        assert!(apply_templates(&t, "").is_err());
        assert!(apply_templates(&t, "   ").is_err());
    }

    #[test]
    fn templates_without_a_slot_are_rejected() {
        assert!(PromptTemplateSet::new(["a photo"]).is_err());
        assert!(PromptTemplateSet::new(["{} and {}"]).is_err());
        assert!(PromptTemplateSet::new(Vec::<String>::new()).is_err());
        let parsed: std::result::Result<PromptTemplateSet, _> =
            serde_json::from_str(r#"["no slot here"]"#);
        assert!(parsed.is_err());
    }

    #[test]
    fn catalog_rejects_duplicates() {
        assert!(ClassCatalog::from_names(["a", "A"]).is_err());
        let c = ClassCatalog::parse("# header\nfirst\n\nsecond\n").unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.id(1), 2);
    }

    #[test]
    fn shuffle_is_seeded() {
        let catalog = ClassCatalog::mock();
        let a = shuffle_class_names(&catalog, 42).unwrap();
        let b = shuffle_class_names(&catalog, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.mapping(&catalog).len(), catalog.len());
    }

    #[test]
    fn shuffle_needs_two_classes() {
        let catalog = ClassCatalog::from_names(["only"]).unwrap();
        assert!(shuffle_class_names(&catalog, 1).is_err());
    }

    #[test]
    fn two_class_swap_rate_is_one_half() {
        let catalog = ClassCatalog::from_names(["a", "b"]).unwrap();
        let swaps = (0..1000u64)
            .filter(|&s| shuffle_class_names(&catalog, s).unwrap().perm == vec![1, 0])
            .count();
        let rate = swaps as f64 / 1000.0;
        assert!((rate - 0.5).abs() <= 0.05, "swap rate {rate}");
    }

    #[test]
    fn identity_permutations_occur() {
        let catalog = ClassCatalog::from_names(["a", "b"]).unwrap();
        assert!((0..100u64).any(|s| shuffle_class_names(&catalog, s).unwrap().fixed_points == 2));
    }

    proptest! {
        #[test]
        fn shuffle_is_a_bijection(n in 2usize..40, seed in any::<u64>()) {
            let p = permutation(n, seed).unwrap();
            let mut sorted = p.perm.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn harvest_never_returns_a_class_name(limit in 1usize..25) {
            let catalog = ClassCatalog::mock();
            let (set, _) = harvest_candidates(&catalog, &Lexicon::mock(), limit, CandidateScope::PerClass).unwrap();
            for n in &set.nouns {
                prop_assert!(!catalog.contains_name(n));
            }
            let unique: HashSet<_> = set.nouns.iter().collect();
            prop_assert_eq!(unique.len(), set.nouns.len());
        }
    }
}
