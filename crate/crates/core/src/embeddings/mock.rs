//! Deterministic semantic mock of a vision-language encoder.
//!
//! Every class gets a unit anchor vector. Registered nouns (class names and
//! their lexical neighbors) are embedded as the class anchor plus a seeded
//! perturbation orthogonal to it; unregistered prompts become a unit vector
//! drawn from a PRNG seeded by a hash of the prompt. Image embeddings are the
//! class anchor plus isotropic Gaussian noise.
//!
//! Hash-seeded PRNG: `seed = u64_le(sha256("{anchor_seed}:{text}")[..8])`,
//! `ChaCha8Rng::seed_from_u64(seed)`, then `dim` draws of `StandardNormal`,
//! normalized.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{normalize, BackendKind, EmbeddingVector, Encoder, ImageInput};
use crate::error::{Error, Result};
use crate::store::hash_seed;

/// Largest allowed |⟨a_c, a_c'⟩| between distinct class anchors.
pub const ANCHOR_COHERENCE_LIMIT: f64 = 0.2;

/// Cap on the norm of the (unscaled) synonym perturbation. Keeps
/// cos(noun, anchor) ≥ 1/sqrt(1 + 2.25 s²) ≥ 1 − s for every s in [0, 1).
const SYNONYM_PERTURBATION_CAP: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemanticMockSpec {
    pub num_classes: usize,
    pub anchor_seed: u64,
    pub synonym_noise: f64,
    pub distractor_noise: f64,
    pub image_noise: f64,
    pub text_dim: usize,
    pub image_dim: usize,
}

impl Default for SemanticMockSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            anchor_seed: 7,
            synonym_noise: 0.3,
            distractor_noise: 2.0,
            image_noise: 0.1,
            text_dim: 32,
            image_dim: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NounKind {
    /// Class name, synonym, hypernym or sibling: close to the class anchor.
    Core,
    /// Weakly related noun: far from every anchor.
    Distractor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisteredNoun {
    pub noun: String,
    pub class_index: usize,
    pub kind: NounKind,
}

pub struct SemanticMock {
    spec: SemanticMockSpec,
    identity: String,
    text_anchors: Vec<Vec<f64>>,
    image_anchors: Vec<Vec<f64>>,
    /// Registered nouns, longest first so multi-word nouns win over their
    /// head words.
    lookup: Vec<(String, EmbeddingVector)>,
}

impl std::fmt::Debug for SemanticMock {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SemanticMock")
            .field("identity", &self.identity)
            .field("registered", &self.lookup.len())
            .finish()
    }
}

impl SemanticMock {
    pub fn new(spec: SemanticMockSpec, registry: &[RegisteredNoun]) -> Result<Self> {
        if spec.num_classes == 0 || spec.text_dim == 0 || spec.image_dim == 0 {
            return Err(Error::Config(
                "mock encoder needs num_classes, text_dim and image_dim > 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&spec.synonym_noise) {
            return Err(Error::Config("synonym_noise must lie in [0, 1)".into()));
        }
        if spec.distractor_noise < 0.0 || spec.image_noise < 0.0 {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        let text_anchors = build_anchors(spec.num_classes, spec.text_dim, spec.anchor_seed)?;
        let image_anchors = text_anchors
            .iter()
            .map(|a| project_anchor(a, spec.image_dim))
            .collect();

        let mut entries: BTreeMap<String, EmbeddingVector> = BTreeMap::new();
        for reg in registry {
            let noun = reg.noun.trim().to_lowercase();
            if noun.is_empty() {
                continue;
            }
            if reg.class_index >= spec.num_classes {
                return Err(Error::Config(format!(
                    "registered noun '{}' refers to class index {} but the mock has {} classes",
                    reg.noun, reg.class_index, spec.num_classes
                )));
            }
            // First registration wins; later duplicates are ignored.
            if entries.contains_key(&noun) {
                continue;
            }
            let anchor = &text_anchors[reg.class_index];
            let v = match reg.kind {
                NounKind::Core => perturbed_anchor(
                    anchor,
                    std::slice::from_ref(anchor),
                    spec.synonym_noise,
                    Some(SYNONYM_PERTURBATION_CAP),
                    false,
                    hash_seed(&format!("{}:noun:{noun}", spec.anchor_seed)),
                )?,
                NounKind::Distractor => {
                    // Push away from every class, not only the own one, when
                    // there is room for it.
                    let avoid: &[Vec<f64>] = if text_anchors.len() < spec.text_dim {
                        &text_anchors
                    } else {
                        std::slice::from_ref(anchor)
                    };
                    perturbed_anchor(
                        anchor,
                        avoid,
                        spec.distractor_noise,
                        None,
                        true,
                        hash_seed(&format!("{}:noun:{noun}", spec.anchor_seed)),
                    )?
                }
            };
            entries.insert(noun, v);
        }

        let identity = {
            let mut desc = serde_json::to_string(&spec)?;
            for noun in entries.keys() {
                desc.push('|');
                desc.push_str(noun);
            }
            let reg_desc: Vec<String> = registry
                .iter()
                .map(|r| format!("{}:{}:{:?}", r.noun, r.class_index, r.kind))
                .collect();
            desc.push_str(&reg_desc.join(","));
            format!(
                "semantic-mock-{}",
                &crate::store::checksum(desc.as_bytes())[..16]
            )
        };

        let mut lookup: Vec<(String, EmbeddingVector)> = entries.into_iter().collect();
        lookup.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));

        Ok(Self {
            spec,
            identity,
            text_anchors,
            image_anchors,
            lookup,
        })
    }

    pub fn spec(&self) -> &SemanticMockSpec {
        &self.spec
    }

    pub fn text_anchor(&self, class_index: usize) -> &[f64] {
        &self.text_anchors[class_index]
    }

    pub fn image_anchor(&self, class_index: usize) -> &[f64] {
        &self.image_anchors[class_index]
    }

    /// The registered noun whose embedding a prompt resolves to, if any.
    pub fn matched_noun(&self, prompt: &str) -> Option<&str> {
        let lowered = prompt.to_lowercase();
        self.lookup
            .iter()
            .find(|(noun, _)| contains_phrase(&lowered, noun))
            .map(|(noun, _)| noun.as_str())
    }
}

impl Encoder for SemanticMock {
    fn identity(&self) -> &str {
        &self.identity
    }

    fn kind(&self) -> BackendKind {
        BackendKind::SemanticMock
    }

    fn text_dim(&self) -> usize {
        self.spec.text_dim
    }

    fn image_dim(&self) -> usize {
        self.spec.image_dim
    }

    fn encode_text(&self, prompt: &str) -> Result<EmbeddingVector> {
        if prompt.trim().is_empty() {
            return Err(Error::Input("prompt must be non-empty".into()));
        }
        let lowered = prompt.to_lowercase();
        if let Some((_, v)) = self
            .lookup
            .iter()
            .find(|(noun, _)| contains_phrase(&lowered, noun))
        {
            return Ok(v.clone());
        }
        hashed_unit_vector(self.spec.anchor_seed, prompt, self.spec.text_dim)
    }

    fn encode_image(&self, input: &ImageInput) -> Result<EmbeddingVector> {
        match input {
            ImageInput::Pixels { .. } => Err(Error::Input(
                "semantic mock consumes mock image content, not pixels".into(),
            )),
            ImageInput::MockContent {
                sample_id,
                class_index,
            } => {
                let anchor = self.image_anchors.get(*class_index).ok_or_else(|| {
                    Error::Input(format!(
                        "class index {class_index} out of range for {} classes",
                        self.spec.num_classes
                    ))
                })?;
                let d = self.spec.image_dim;
                let mut rng = ChaCha8Rng::seed_from_u64(hash_seed(&format!(
                    "{}:image:{sample_id}",
                    self.spec.anchor_seed
                )));
                let scale = self.spec.image_noise / (d as f64).sqrt();
                let v: Vec<f64> = anchor
                    .iter()
                    .map(|&a| {
                        let g: f64 = StandardNormal.sample(&mut rng);
                        a + scale * g
                    })
                    .collect();
                normalize(&v)
            }
        }
    }
}

/// Unit vector from the documented hash-seeded PRNG.
pub(crate) fn hashed_unit_vector(anchor_seed: u64, text: &str, dim: usize) -> Result<EmbeddingVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(hash_seed(&format!("{anchor_seed}:{text}")));
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&v)
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn build_anchors(num_classes: usize, dim: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut anchors: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    if num_classes <= dim {
        // Gram-Schmidt on Gaussian draws: exactly orthonormal.
        while anchors.len() < num_classes {
            let mut v = gaussian(&mut rng, dim);
            for a in &anchors {
                let p = dot(&v, a);
                v.iter_mut().zip(a).for_each(|(x, y)| *x -= p * y);
            }
            let n = dot(&v, &v).sqrt();
            if n > 1e-8 {
                anchors.push(v.into_iter().map(|x| x / n).collect());
            }
        }
    } else {
        const MAX_TRIES: usize = 10_000;
        let mut tries = 0;
        while anchors.len() < num_classes {
            tries += 1;
            if tries > MAX_TRIES {
                return Err(Error::Config(format!(
                    "cannot place {num_classes} near-orthogonal anchors in {dim} dimensions"
                )));
            }
            let v = gaussian(&mut rng, dim);
            let n = dot(&v, &v).sqrt();
            let v: Vec<f64> = v.into_iter().map(|x| x / n).collect();
            if anchors
                .iter()
                .all(|a| dot(a, &v).abs() <= ANCHOR_COHERENCE_LIMIT)
            {
                anchors.push(v);
            }
        }
    }
    for i in 0..anchors.len() {
        for j in 0..i {
            let c = dot(&anchors[i], &anchors[j]).abs();
            if c > ANCHOR_COHERENCE_LIMIT {
                return Err(Error::Config(format!(
                    "anchors {i} and {j} have coherence {c:.3} > {ANCHOR_COHERENCE_LIMIT}"
                )));
            }
        }
    }
    Ok(anchors)
}

/// Zero-pads or truncates (then renormalizes) a text anchor into image space.
fn project_anchor(anchor: &[f64], dim: usize) -> Vec<f64> {
    let mut out: Vec<f64> = anchor.iter().copied().take(dim).collect();
    out.resize(dim, 0.0);
    let n = dot(&out, &out).sqrt();
    if n > 0.0 {
        out.iter_mut().for_each(|x| *x /= n);
    } else {
        out[0] = 1.0;
    }
    out
}

/// `normalize(anchor + scale · p)` with `p` a seeded Gaussian direction
/// orthogonal to every vector in `avoid` (which must include the anchor).
/// With `unit_direction` the perturbation has norm exactly `scale`;
/// otherwise its norm is Gaussian (≈ 1) clipped at `cap`.
fn perturbed_anchor(
    anchor: &[f64],
    avoid: &[Vec<f64>],
    scale: f64,
    cap: Option<f64>,
    unit_direction: bool,
    seed: u64,
) -> Result<EmbeddingVector> {
    let dim = anchor.len();
    if dim == 1 || scale == 0.0 {
        return normalize(anchor);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g: Vec<f64> = gaussian(&mut rng, dim)
        .into_iter()
        .map(|x| x / (dim as f64).sqrt())
        .collect();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(avoid.len());
    for a in avoid {
        let mut b = a.clone();
        for q in &basis {
            let p = dot(&b, q);
            b.iter_mut().zip(q).for_each(|(x, y)| *x -= p * y);
        }
        let n = dot(&b, &b).sqrt();
        if n > 1e-8 {
            basis.push(b.into_iter().map(|x| x / n).collect());
        }
    }
    for q in &basis {
        let p = dot(&g, q);
        g.iter_mut().zip(q).for_each(|(x, y)| *x -= p * y);
    }
    let n = dot(&g, &g).sqrt();
    if n == 0.0 {
        return normalize(anchor);
    }
    let factor = if unit_direction {
        1.0 / n
    } else {
        match cap {
            Some(c) if n > c => c / n,
            _ => 1.0,
        }
    };
    let v: Vec<f64> = anchor
        .iter()
        .zip(&g)
        .map(|(a, x)| a + scale * factor * x)
        .collect();
    normalize(&v)
}

/// True when `phrase` occurs in `text` delimited by non-alphanumerics.
fn contains_phrase(text: &str, phrase: &str) -> bool {
    let bytes = text.as_bytes();
    let mut start = 0;
    while let Some(pos) = text[start..].find(phrase) {
        let begin = start + pos;
        let end = begin + phrase.len();
        let left_ok = begin == 0 || !bytes[begin - 1].is_ascii_alphanumeric();
        let right_ok = end == bytes.len() || !bytes[end].is_ascii_alphanumeric();
        if left_ok && right_ok {
            return true;
        }
        start = begin + 1;
        while !text.is_char_boundary(start) {
            start += 1;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    fn registry() -> Vec<RegisteredNoun> {
        let mut r = Vec::new();
        for c in 0..5 {
            r.push(RegisteredNoun {
                noun: format!("c{c}"),
                class_index: c,
                kind: NounKind::Core,
            });
            r.push(RegisteredNoun {
                noun: format!("syn{c}"),
                class_index: c,
                kind: NounKind::Core,
            });
            r.push(RegisteredNoun {
                noun: format!("far{c}"),
                class_index: c,
                kind: NounKind::Distractor,
            });
        }
        r
    }

    fn mock(synonym_noise: f64, image_noise: f64) -> SemanticMock {
        SemanticMock::new(
            SemanticMockSpec {
                num_classes: 5,
                anchor_seed: 11,
                synonym_noise,
                distractor_noise: 2.0,
                image_noise,
                text_dim: 16,
                image_dim: 16,
            },
            &registry(),
        )
        .unwrap()
    }

    fn cos(a: &EmbeddingVector, b: &[f64]) -> f64 {
        a.dot(b) / (b.iter().map(|x| x * x).sum::<f64>().sqrt())
    }

    #[test]
    fn registered_class_token_is_near_its_anchor() {
        let m = mock(0.3, 0.0);
        let v = m.encode_text("a photo of a c3").unwrap();
        assert!(cos(&v, m.text_anchor(3)) >= 1.0 - 0.3);
    }

    #[test]
    fn text_encoding_is_deterministic() {
        let m = mock(0.3, 0.0);
        assert_eq!(
            m.encode_text("a photo of a syn2").unwrap(),
            m.encode_text("a photo of a syn2").unwrap()
        );
        let again = mock(0.3, 0.0);
        assert_eq!(
            m.encode_text("an unregistered thing").unwrap(),
            again.encode_text("an unregistered thing").unwrap()
        );
    }

    #[test]
    fn distractors_stay_far_from_every_anchor() {
        let m = mock(0.3, 0.0);
        for c in 0..5 {
            let v = m.encode_text(&format!("far{c}")).unwrap();
            for k in 0..5 {
                assert!(cos(&v, m.text_anchor(k)) <= 0.5);
            }
        }
    }

    #[test]
    fn anchors_are_near_orthogonal_even_when_overcomplete() {
        let anchors = build_anchors(12, 8, 3);
        // 12 vectors in 8 dims with |cos| ≤ 0.2 may or may not be reachable;
        // either the check passes or construction fails loudly.
        if let Ok(a) = anchors {
            for i in 0..a.len() {
                for j in 0..i {
                    assert!(dot(&a[i], &a[j]).abs() <= ANCHOR_COHERENCE_LIMIT);
                }
            }
        }
        let a = build_anchors(6, 16, 3).unwrap();
        for i in 0..6 {
            assert!((dot(&a[i], &a[i]) - 1.0).abs() < 1e-12);
            for j in 0..i {
                assert!(dot(&a[i], &a[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_noise_image_is_the_anchor() {
        let m = mock(0.3, 0.0);
        let v = m
            .encode_image(&ImageInput::MockContent {
                sample_id: 99,
                class_index: 3,
            })
            .unwrap();
        let anchor = normalize(m.image_anchor(3)).unwrap();
        assert_eq!(v, anchor);
    }

    #[test]
    fn pixels_are_rejected_by_the_mock() {
        let m = mock(0.3, 0.0);
        let err = m.encode_image(&ImageInput::Pixels {
            width: 1,
            height: 1,
            channels: 1,
            data: vec![0.0],
        });
        assert!(matches!(err, Err(Error::Input(_))));
        assert!(m
            .encode_image(&ImageInput::MockContent {
                sample_id: 0,
                class_index: 5
            })
            .is_err());
    }

    #[test]
    fn phrase_matching_respects_word_boundaries() {
        assert!(contains_phrase("a photo of a desk phone", "desk phone"));
        assert!(contains_phrase("phone", "phone"));
        assert!(!contains_phrase("a photo of a telephone", "phone"));
        assert!(!contains_phrase("a c30", "c3"));
    }

    #[test]
    fn longest_registered_noun_wins() {
        let reg = vec![
            RegisteredNoun {
                noun: "phone".into(),
                class_index: 0,
                kind: NounKind::Core,
            },
            RegisteredNoun {
                noun: "phone booth".into(),
                class_index: 1,
                kind: NounKind::Core,
            },
        ];
        let m = SemanticMock::new(
            SemanticMockSpec {
                num_classes: 2,
                ..Default::default()
            },
            &reg,
        )
        .unwrap();
        assert_eq!(m.matched_noun("a photo of a phone booth"), Some("phone booth"));
        assert_eq!(m.matched_noun("a photo of a phone"), Some("phone"));
        assert_eq!(m.matched_noun("a photo of a booth"), None);
    }
}
