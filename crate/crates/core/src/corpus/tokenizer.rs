//! Byte-level tokenizer over printable ASCII plus five special tokens.

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
/// Stands in for any byte outside the charset.
pub const UNK: usize = 4;

const SPECIALS: usize = 5;
const FIRST_CHAR: u8 = b' ';
const LAST_CHAR: u8 = b'~';

pub const VOCAB_SIZE: usize = SPECIALS + (LAST_CHAR - FIRST_CHAR + 1) as usize;

/// Token ids plus the number of bytes that fell outside the charset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoding {
    pub ids: Vec<usize>,
    pub unknown: usize,
}

pub fn encode(text: &str) -> Encoding {
    let mut unknown = 0;
    let ids = text
        .bytes()
        .map(|b| {
            if (FIRST_CHAR..=LAST_CHAR).contains(&b) {
                SPECIALS + (b - FIRST_CHAR) as usize
            } else {
                unknown += 1;
                UNK
            }
        })
        .collect();
    Encoding { ids, unknown }
}

pub fn tokenize(text: &str) -> Vec<usize> {
    encode(text).ids
}

/// Inverse of [`tokenize`] on charset text. Control tokens are dropped and
/// `UNK` renders as U+FFFD.
pub fn detokenize(ids: &[usize]) -> String {
    let mut out = String::with_capacity(ids.len());
    for &id in ids {
        if id == UNK {
            out.push('\u{FFFD}');
        } else if (SPECIALS..VOCAB_SIZE).contains(&id) {
            out.push((FIRST_CHAR + (id - SPECIALS) as u8) as char);
        }
    }
    out
}

pub fn in_charset(text: &str) -> bool {
    text.bytes().all(|b| (FIRST_CHAR..=LAST_CHAR).contains(&b))
}

/// A training/evaluation view of one sample: `[BOS] input [SEP] output [EOS]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    /// Model inputs: the full sequence without its last token.
    pub inputs: Vec<usize>,
    /// Next-token targets aligned with `inputs`.
    pub targets: Vec<usize>,
    /// True where the target belongs to the completion (output tokens and EOS).
    pub mask: Vec<bool>,
    /// `[BOS] input [SEP]`, the decoding prompt.
    pub prompt: Vec<usize>,
}

impl Example {
    pub fn new(input: &str, output: &str) -> Self {
        let mut prompt = vec![BOS];
        prompt.extend(tokenize(input));
        prompt.push(SEP);
        let mut full = prompt.clone();
        full.extend(tokenize(output));
        full.push(EOS);

        let inputs = full[..full.len() - 1].to_vec();
        let targets = full[1..].to_vec();
        let mask = (0..targets.len()).map(|t| t + 1 >= prompt.len()).collect();
        Example {
            inputs,
            targets,
            mask,
            prompt,
        }
    }

    /// Full sequence length including BOS, SEP and EOS.
    pub fn seq_len(&self) -> usize {
        self.inputs.len() + 1
    }

    pub fn completion_tokens(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}
