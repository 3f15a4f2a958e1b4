//! Small probabilistic grammar producing English-like text with part-of-speech
//! labels. Used as a stand-in corpus and as the token-tagging probe task.
//!
//! Verbs constrain which noun classes may appear as subject and object, so a
//! masked noun is often recoverable from words to its right; a few words
//! (`saw`, `watch`, `fly`, `cut`) are ambiguous between noun and verb.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::tokenizer::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tag {
    Space,
    Punct,
    Det,
    Adj,
    Noun,
    Verb,
    Prep,
    Conj,
}

impl Tag {
    pub const ALL: [Tag; 8] = [
        Tag::Space,
        Tag::Punct,
        Tag::Det,
        Tag::Adj,
        Tag::Noun,
        Tag::Verb,
        Tag::Prep,
        Tag::Conj,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Tag::Space => "SPACE",
            Tag::Punct => "PUNCT",
            Tag::Det => "DET",
            Tag::Adj => "ADJ",
            Tag::Noun => "NOUN",
            Tag::Verb => "VERB",
            Tag::Prep => "PREP",
            Tag::Conj => "CONJ",
        }
    }
}

pub const NUM_TAGS: usize = Tag::ALL.len();

#[derive(Clone, Copy, PartialEq, Eq)]
enum Class {
    Animal,
    Person,
    Tool,
}

struct NounClass {
    class: Class,
    nouns: &'static [&'static str],
    adjs: &'static [&'static str],
}

const CLASSES: [NounClass; 3] = [
    NounClass {
        class: Class::Animal,
        nouns: &["cat", "dog", "fox", "wolf", "horse", "mouse", "bird", "goat", "sheep", "tiger", "fly"],
        adjs: &["hungry", "sleepy", "wild", "tiny", "brave", "old"],
    },
    NounClass {
        class: Class::Person,
        nouns: &["farmer", "baker", "doctor", "teacher", "sailor", "child", "king", "queen"],
        adjs: &["tired", "clever", "young", "kind", "angry", "old"],
    },
    NounClass {
        class: Class::Tool,
        nouns: &["hammer", "knife", "saw", "rope", "watch", "spoon", "lamp", "brush"],
        adjs: &["sharp", "heavy", "rusty", "shiny", "broken"],
    },
];

struct Verb {
    word: &'static str,
    subjects: &'static [Class],
    objects: &'static [Class],
}

const VERBS: [Verb; 13] = [
    Verb { word: "chased", subjects: &[Class::Animal, Class::Person], objects: &[Class::Animal] },
    Verb { word: "bit", subjects: &[Class::Animal], objects: &[Class::Person, Class::Animal] },
    Verb { word: "fed", subjects: &[Class::Person], objects: &[Class::Animal] },
    Verb { word: "saw", subjects: &[Class::Animal, Class::Person], objects: &[Class::Animal, Class::Person, Class::Tool] },
    Verb { word: "watched", subjects: &[Class::Animal, Class::Person], objects: &[Class::Animal, Class::Person] },
    Verb { word: "sharpened", subjects: &[Class::Person], objects: &[Class::Tool] },
    Verb { word: "dropped", subjects: &[Class::Person], objects: &[Class::Tool] },
    Verb { word: "found", subjects: &[Class::Person, Class::Animal], objects: &[Class::Tool] },
    Verb { word: "hired", subjects: &[Class::Person], objects: &[Class::Person] },
    Verb { word: "helped", subjects: &[Class::Person], objects: &[Class::Person] },
    Verb { word: "cut", subjects: &[Class::Tool, Class::Person], objects: &[Class::Tool] },
    Verb { word: "broke", subjects: &[Class::Tool, Class::Person], objects: &[Class::Tool] },
    Verb { word: "watch", subjects: &[Class::Person], objects: &[Class::Animal] },
];

const DETS: [&str; 5] = ["the", "a", "this", "that", "every"];
const PREPS: [&str; 5] = ["in", "near", "behind", "under", "beside"];
const PLACES: [&str; 8] = ["garden", "river", "market", "forest", "kitchen", "village", "bridge", "castle"];
const CONJS: [&str; 3] = ["and", "while", "because"];

/// Text plus a label per byte.
#[derive(Debug, Clone, Default)]
pub struct Tagged {
    pub text: String,
    pub labels: Vec<Tag>,
}

impl Tagged {
    fn push(&mut self, s: &str, tag: Tag) {
        self.text.push_str(s);
        self.labels.extend(std::iter::repeat_n(tag, s.len()));
    }

    fn word(&mut self, s: &str, tag: Tag) {
        if !self.text.is_empty() && !self.text.ends_with(' ') && !self.text.ends_with('\n') {
            self.push(" ", Tag::Space);
        }
        self.push(s, tag);
    }

    pub fn tokens(&self) -> Vec<TokenId> {
        self.text.bytes().map(TokenId::from).collect()
    }

    pub fn label_ids(&self) -> Vec<usize> {
        self.labels.iter().map(|t| t.index()).collect()
    }
}

fn class_of(c: Class) -> &'static NounClass {
    CLASSES.iter().find(|k| k.class == c).expect("every class is listed")
}

fn noun_phrase<R: Rng>(out: &mut Tagged, class: Class, rng: &mut R) {
    let nc = class_of(class);
    out.word(DETS.choose(rng).unwrap(), Tag::Det);
    if rng.random_bool(0.5) {
        out.word(nc.adjs.choose(rng).unwrap(), Tag::Adj);
    }
    out.word(nc.nouns.choose(rng).unwrap(), Tag::Noun);
}

fn clause<R: Rng>(out: &mut Tagged, rng: &mut R) {
    let verb = VERBS.choose(rng).unwrap();
    let subj = *verb.subjects.choose(rng).unwrap();
    let obj = *verb.objects.choose(rng).unwrap();
    noun_phrase(out, subj, rng);
    out.word(verb.word, Tag::Verb);
    noun_phrase(out, obj, rng);
    if rng.random_bool(0.4) {
        out.word(PREPS.choose(rng).unwrap(), Tag::Prep);
        out.word("the", Tag::Det);
        out.word(PLACES.choose(rng).unwrap(), Tag::Noun);
    }
}

/// One sentence, optionally two clauses joined by a conjunction.
pub fn sentence<R: Rng>(rng: &mut R) -> Tagged {
    let mut out = Tagged::default();
    clause(&mut out, rng);
    if rng.random_bool(0.25) {
        out.push(",", Tag::Punct);
        out.word(CONJS.choose(rng).unwrap(), Tag::Conj);
        clause(&mut out, rng);
    }
    out.push(".", Tag::Punct);
    out
}

/// At least `min_bytes` of text, sentences separated by spaces and newlines.
pub fn generate_text(min_bytes: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::with_capacity(min_bytes + 128);
    let mut in_para = 0;
    while text.len() < min_bytes {
        let s = sentence(&mut rng);
        text.push_str(&s.text);
        in_para += 1;
        if in_para >= 5 && rng.random_bool(0.3) {
            text.push('\n');
            in_para = 0;
        } else {
            text.push(' ');
        }
    }
    text
}

/// Tagged token sequences of exactly `len` bytes cut from a sentence stream.
pub fn tagged_sequences(count: usize, len: usize, seed: u64) -> Vec<(Vec<TokenId>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stream = Tagged::default();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        while stream.text.len() < len {
            let s = sentence(&mut rng);
            if !stream.text.is_empty() {
                stream.push(" ", Tag::Space);
            }
            stream.push(&s.text, Tag::Space);
            let n = stream.labels.len();
            stream.labels.truncate(n - s.labels.len());
            stream.labels.extend_from_slice(&s.labels);
        }
        let tokens: Vec<TokenId> = stream.text.as_bytes()[..len].iter().map(|&b| b as TokenId).collect();
        let labels: Vec<usize> = stream.labels[..len].iter().map(|t| t.index()).collect();
        out.push((tokens, labels));
        stream = Tagged::default();
    }
    out
}
