//! GPT-2 byte-level BPE.
//!
//! Text is pre-split with the GPT-2 regex, each piece is mapped byte-wise onto
//! the printable byte alphabet, and adjacent symbols are merged lowest rank
//! first until no ranked pair remains.

use std::collections::HashMap;
use std::path::Path;

use fancy_regex::Regex;

use crate::error::{Error, Result};

const GPT2_PATTERN: &str =
    r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

/// The fixed GPT-2 byte → printable-char table.
pub fn byte_encoder() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut assigned = [false; 256];
    let printable = (b'!'..=b'~').chain(0xA1..=0xAC).chain(0xAE..=0xFF);
    for b in printable {
        table[b as usize] = char::from(b);
        assigned[b as usize] = true;
    }
    let mut n = 0u32;
    for b in 0..256usize {
        if !assigned[b] {
            table[b] = char::from_u32(256 + n).expect("valid code point");
            n += 1;
        }
    }
    table
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    /// (left, right) → (rank, merged id)
    merges: HashMap<(u32, u32), (u32, u32)>,
    byte_ids: [u32; 256],
    byte_decoder: HashMap<char, u8>,
    pattern: Regex,
}

impl Tokenizer {
    pub fn from_files(vocab: impl AsRef<Path>, merges: impl AsRef<Path>) -> Result<Self> {
        let vocab_path = vocab.as_ref();
        let merges_path = merges.as_ref();
        let vocab_json =
            std::fs::read_to_string(vocab_path).map_err(|e| Error::io(vocab_path, e))?;
        let merges_txt =
            std::fs::read_to_string(merges_path).map_err(|e| Error::io(merges_path, e))?;
        Self::from_strs(&vocab_json, &merges_txt)
    }

    /// Build from the contents of `vocab.json` and `merges.txt`.
    pub fn from_strs(vocab_json: &str, merges_txt: &str) -> Result<Self> {
        let token_to_id: HashMap<String, u32> = serde_json::from_str(vocab_json)
            .map_err(|e| Error::Tokenizer(format!("vocab.json: {e}")))?;
        let n = token_to_id.len();
        let mut id_to_token = vec![None; n];
        for (tok, &id) in &token_to_id {
            let slot = id_to_token
                .get_mut(id as usize)
                .ok_or_else(|| Error::Tokenizer(format!("id {id} of `{tok}` is not dense in 0..{n}")))?;
            if slot.replace(tok.clone()).is_some() {
                return Err(Error::Tokenizer(format!("duplicate id {id}")));
            }
        }
        let id_to_token: Vec<String> = id_to_token.into_iter().map(|t| t.unwrap()).collect();

        let encoder = byte_encoder();
        let mut byte_ids = [0u32; 256];
        for (b, c) in encoder.iter().enumerate() {
            byte_ids[b] = *token_to_id
                .get(&c.to_string())
                .ok_or_else(|| Error::Tokenizer(format!("byte {b:#04x} has no vocab entry")))?;
        }
        let byte_decoder = encoder
            .iter()
            .enumerate()
            .map(|(b, &c)| (c, b as u8))
            .collect();

        let mut merges = HashMap::new();
        let lines = merges_txt
            .lines()
            .filter(|l| !l.starts_with("#version") && !l.trim().is_empty());
        for (rank, line) in lines.enumerate() {
            let (a, b) = line
                .split_once(' ')
                .ok_or_else(|| Error::Tokenizer(format!("bad merge line `{line}`")))?;
            let lookup = |s: &str| {
                token_to_id
                    .get(s)
                    .copied()
                    .ok_or_else(|| Error::Tokenizer(format!("merge symbol `{s}` not in vocab")))
            };
            let merged = lookup(&format!("{a}{b}"))?;
            merges.insert((lookup(a)?, lookup(b)?), (rank as u32, merged));
        }

        Ok(Self {
            token_to_id,
            id_to_token,
            merges,
            byte_ids,
            byte_decoder,
            pattern: Regex::new(GPT2_PATTERN).expect("static pattern"),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        let mut end = 0;
        for piece in self.pattern.find_iter(text) {
            match piece {
                Ok(m) => {
                    self.encode_piece(m.as_str(), &mut ids);
                    end = m.end();
                }
                // backtrack limit hit: keep the remainder as one piece
                Err(_) => break,
            }
        }
        if end < text.len() {
            self.encode_piece(&text[end..], &mut ids);
        }
        ids
    }

    fn encode_piece(&self, piece: &str, out: &mut Vec<u32>) {
        let mut symbols: Vec<u32> = piece.bytes().map(|b| self.byte_ids[b as usize]).collect();
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.merges.get(&(w[0], w[1])).map(|&(r, m)| (r, i, m)))
                .min();
            let Some((_, at, merged)) = best else { break };
            let pair = (symbols[at], symbols[at + 1]);
            let mut next = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && (symbols[i], symbols[i + 1]) == pair {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(symbols[i]);
                    i += 1;
                }
            }
            symbols = next;
        }
        out.extend(symbols);
    }

    /// Raw bytes of a token sequence.
    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut bytes = Vec::new();
        for &id in ids {
            let tok = self
                .id_to_token
                .get(id as usize)
                .ok_or(Error::UnknownToken(id))?;
            bytes.extend(tok.chars().map(|c| self.byte_decoder.get(&c).copied().unwrap_or(b'?')));
        }
        Ok(bytes)
    }

    /// Decode to text; invalid UTF-8 (a split multi-byte character) is replaced.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    /// Printable form of a single token, for reports.
    pub fn token_text(&self, id: u32) -> String {
        self.decode(&[id]).unwrap_or_else(|_| format!("<{id}>"))
    }

    /// The id of `text` if it encodes to exactly one token.
    pub fn single_token_id(&self, text: &str) -> Result<u32> {
        match self.encode(text).as_slice() {
            [id] => Ok(*id),
            other => Err(Error::MultiToken {
                text: text.to_string(),
                count: other.len(),
            }),
        }
    }
}
