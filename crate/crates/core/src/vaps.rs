//! Three-turn visual-attribute prompting against a multimodal chat model, and
//! the text encoder that turns the final summary into a condition vector.
//!
//! Turn 1 shows the image with an open-ended observation question. Turn 2 asks
//! about the modality's characteristic attributes in a fresh context, with
//! neither the image nor the first answer. Turn 3 sends both earlier answers,
//! the image and a summarization question, and its answer is the description.

use alloc::borrow::ToOwned;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Modality {
    Dermatologic,
    Colorectal,
    ChestXray,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Dermatologic, Modality::Colorectal, Modality::ChestXray];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Dermatologic => "dermatologic",
            Modality::Colorectal => "colorectal",
            Modality::ChestXray => "chest_xray",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid("modality", format!("{s:?} is not one of dermatologic, colorectal, chest_xray")))
    }
}

/// The three questions for one modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplateSet {
    pub modality: Modality,
    pub q1: &'static str,
    pub q2: &'static str,
    pub q3: &'static str,
    /// False for templates written by analogy rather than taken from a published protocol.
    pub canonical: bool,
}

impl PromptTemplateSet {
    pub fn question(&self, turn: Turn) -> &'static str {
        match turn {
            Turn::Impression => self.q1,
            Turn::Attributes => self.q2,
            Turn::Summary => self.q3,
        }
    }
}

const DERM: PromptTemplateSet = PromptTemplateSet {
    modality: Modality::Dermatologic,
    q1: "You are an AI visual assistant observing a skin lesion image. Describe the information you observe from the image without providing any conclusions.",
    q2: "Skin lesions may present with diverse shapes, colors, sizes, and texture features. The surrounding skin may also appear normal or show signs of inflammation, pigmentation, or other changes. Can you provide the specific aspects of these features and how they manifest in different ways?",
    q3: "Based on this image itself, please describe it shortly and concisely, according to the shape, color, size (due to the unavailability of quantitative dimensions, you can just describe their approximate proportion in the whole image), and texture of the lesion and skin background.",
    canonical: true,
};

const COLO: PromptTemplateSet = PromptTemplateSet {
    modality: Modality::Colorectal,
    q1: "You are an AI visual assistant observing a colonoscopy image. Describe the information you observe from the image without providing any conclusions.",
    q2: "Colorectal lesions seen during colonoscopy may present with diverse shapes, colors, sizes, and surface textures. The surrounding mucosa may also appear normal or show signs of inflammation, bleeding, vascular changes, or other alterations. Can you provide the specific aspects of these features and how they manifest in different ways?",
    q3: "Based on this image itself, please describe it shortly and concisely, according to the shape, color, size (due to the unavailability of quantitative dimensions, you can just describe their approximate proportion in the whole image), and surface texture of the lesion and surrounding mucosa.",
    canonical: false,
};

const CXR: PromptTemplateSet = PromptTemplateSet {
    modality: Modality::ChestXray,
    q1: "You are an AI visual assistant observing a chest X-ray image. Describe the information you observe from the image without providing any conclusions.",
    q2: "Findings on chest radiographs may present with diverse shapes, densities, sizes, locations, and texture patterns. The lung fields, heart silhouette, and bony structures may also appear normal or show opacities, consolidation, effusion, or other changes. Can you provide the specific aspects of these features and how they manifest in different ways?",
    q3: "Based on this image itself, please describe it shortly and concisely, according to the shape, density, size (due to the unavailability of quantitative dimensions, you can just describe their approximate proportion in the whole image), location, and texture of any findings and the surrounding anatomy.",
    canonical: false,
};

pub fn templates(modality: Modality) -> PromptTemplateSet {
    match modality {
        Modality::Dermatologic => DERM,
        Modality::Colorectal => COLO,
        Modality::ChestXray => CXR,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Turn {
    Impression,
    Attributes,
    Summary,
}

impl Turn {
    pub fn number(self) -> u8 {
        match self {
            Turn::Impression => 1,
            Turn::Attributes => 2,
            Turn::Summary => 3,
        }
    }
}

/// Encoded image bytes plus the identifier they came from.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ImageAttachment {
    pub id: String,
    pub media_type: String,
    #[cfg_attr(feature = "serde", serde(skip))]
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Part {
    Text(String),
    Image(ImageAttachment),
}

/// One chat call: the user content parts, in order. Every call starts a new conversation.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MllmRequest {
    pub turn: Turn,
    pub parts: Vec<Part>,
}

impl MllmRequest {
    pub fn has_image(&self) -> bool {
        self.parts.iter().any(|p| matches!(p, Part::Image(_)))
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.parts.iter().filter_map(|p| match p {
            Part::Text(t) => Some(t.as_str()),
            Part::Image(_) => None,
        })
    }
}

/// A multimodal chat model. Implementations own their timeout and retry policy
/// and report exhausted retries as [`Error::Transport`].
pub trait MllmClient {
    fn complete(&self, request: &MllmRequest) -> Result<String>;
}

impl<C: MllmClient + ?Sized> MllmClient for &C {
    fn complete(&self, request: &MllmRequest) -> Result<String> {
        (**self).complete(request)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Exchange {
    pub request: MllmRequest,
    pub response: String,
}

/// The complete record of one image's three turns.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MllmTranscript {
    pub image_id: String,
    pub modality: Modality,
    pub t1: String,
    pub t2: String,
    pub tmix: String,
    /// Raw exchanges in turn order.
    pub exchanges: Vec<Exchange>,
}

impl MllmTranscript {
    pub fn is_complete(&self) -> bool {
        self.exchanges.len() == 3
            && self.exchanges.iter().map(|e| e.request.turn.number()).eq([1, 2, 3])
            && !self.tmix.trim().is_empty()
    }
}

fn call(client: &(impl MllmClient + ?Sized), request: MllmRequest) -> Result<Exchange> {
    let response = client.complete(&request)?;
    if response.trim().is_empty() {
        return Err(Error::Protocol(format!("empty response to turn {}", request.turn.number())));
    }
    Ok(Exchange { request, response })
}

/// Runs the three turns for one image. Any failure discards the partial transcript.
pub fn run_vaps(image: &ImageAttachment, modality: Modality, client: &(impl MllmClient + ?Sized)) -> Result<MllmTranscript> {
    if image.id.is_empty() {
        return Err(Error::invalid("image", "attachment has no id"));
    }
    let q = templates(modality);
    let first = call(
        client,
        MllmRequest { turn: Turn::Impression, parts: alloc::vec![Part::Image(image.clone()), Part::Text(q.q1.to_owned())] },
    )?;
    let second = call(client, MllmRequest { turn: Turn::Attributes, parts: alloc::vec![Part::Text(q.q2.to_owned())] })?;
    let third = call(
        client,
        MllmRequest {
            turn: Turn::Summary,
            parts: alloc::vec![
                Part::Text(first.response.clone()),
                Part::Text(second.response.clone()),
                Part::Image(image.clone()),
                Part::Text(q.q3.to_owned()),
            ],
        },
    )?;
    Ok(MllmTranscript {
        image_id: image.id.clone(),
        modality,
        t1: first.response.clone(),
        t2: second.response.clone(),
        tmix: third.response.clone(),
        exchanges: alloc::vec![first, second, third],
    })
}

/// Answers each turn with a fixed string.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptedClient {
    pub responses: [String; 3],
}

impl ScriptedClient {
    pub fn new(r1: &str, r2: &str, r3: &str) -> Self {
        Self { responses: [r1.to_owned(), r2.to_owned(), r3.to_owned()] }
    }
}

impl MllmClient for ScriptedClient {
    fn complete(&self, request: &MllmRequest) -> Result<String> {
        Ok(self.responses[request.turn.number() as usize - 1].clone())
    }
}

/// Answers the summary turn with a known description per image id; used where
/// ground-truth attributes are available, as in the toy benchmark.
#[derive(Debug, Clone, Default)]
pub struct AttributeOracleClient {
    descriptions: alloc::collections::BTreeMap<String, String>,
}

impl AttributeOracleClient {
    pub fn new(pairs: impl IntoIterator<Item = (String, String)>) -> Self {
        Self { descriptions: pairs.into_iter().collect() }
    }
}

impl MllmClient for AttributeOracleClient {
    fn complete(&self, request: &MllmRequest) -> Result<String> {
        let image_id = request.parts.iter().find_map(|p| match p {
            Part::Image(a) => Some(a.id.as_str()),
            Part::Text(_) => None,
        });
        let known = |id: &str| {
            self.descriptions.get(id).cloned().ok_or_else(|| Error::Transport(format!("no description for image {id}")))
        };
        match (request.turn, image_id) {
            (Turn::Impression, Some(id)) => Ok(format!("The image shows {}.", known(id)?)),
            (Turn::Attributes, _) => Ok("Lesions vary in shape, color, size and surface texture; the surrounding skin \
                 tone and grain also vary."
                .into()),
            (Turn::Summary, Some(id)) => known(id),
            (turn, None) => Err(Error::Protocol(format!("turn {} arrived without an image", turn.number()))),
        }
    }
}

/// A unit-norm description vector and its provenance.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TextEmbedding {
    pub vector: Vec<f64>,
    pub provider: String,
    /// Hex SHA-256 of the source text.
    pub text_hash: String,
}

pub trait TextEncoder {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    /// Raw (not necessarily normalized) vector of width [`TextEncoder::dim`].
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Encodes a description into a unit-norm vector.
pub fn encode_description(text: &str, provider: &(impl TextEncoder + ?Sized)) -> Result<TextEmbedding> {
    if text.trim().is_empty() {
        return Err(Error::invalid("text", "description is empty"));
    }
    let mut vector = provider.embed(text)?;
    if vector.len() != provider.dim() {
        return Err(Error::shape(format!("width {}", provider.dim()), format!("{}", vector.len())));
    }
    let norm = crate::math::sqrt(vector.iter().map(|v| v * v).sum::<f64>());
    if !norm.is_finite() || norm == 0.0 {
        return Err(Error::Numeric { location: format!("text encoder {}", provider.id()), reason: "degenerate vector".into() });
    }
    vector.iter_mut().for_each(|v| *v /= norm);
    Ok(TextEmbedding { vector, provider: provider.id().into(), text_hash: sha256_hex(text.as_bytes()) })
}

/// Signed feature hashing of lowercase words and word bigrams, plus a faint
/// whole-string component so distinct strings never coincide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedBagOfWords {
    pub dim: usize,
}

impl HashedBagOfWords {
    pub const ID: &'static str = "hashed-bow-v1";

    fn add(&self, out: &mut [f64], key: &[u8], weight: f64) {
        let d = Sha256::digest(key);
        let mut word = [0u8; 8];
        word.copy_from_slice(&d[..8]);
        let h = u64::from_le_bytes(word);
        let sign = if d[8] & 1 == 0 { 1.0 } else { -1.0 };
        out[(h % self.dim as u64) as usize] += sign * weight;
    }
}

impl TextEncoder for HashedBagOfWords {
    fn id(&self) -> &str {
        Self::ID
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        if self.dim == 0 {
            return Err(Error::invalid("text_dim", "must be positive"));
        }
        let mut out = alloc::vec![0.0; self.dim];
        let words: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| w.to_lowercase())
            .collect();
        for w in &words {
            self.add(&mut out, format!("w:{w}").as_bytes(), 1.0);
        }
        for pair in words.windows(2) {
            self.add(&mut out, format!("b:{} {}", pair[0], pair[1]).as_bytes(), 0.5);
        }
        let mut whole = b"s:".to_vec();
        whole.extend_from_slice(text.as_bytes());
        self.add(&mut out, &whole, if words.is_empty() { 1.0 } else { 0.1 });
        Ok(out)
    }
}
