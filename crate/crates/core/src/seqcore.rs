//! Vocabularies, tokenization, anchor insertion, and FASTA I/O.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SeqError {
    #[error("unknown residue {1:?} at position {0}")]
    UnknownResidue(usize, char),
    #[error("anchor index {0} out of range for sequence of length {1}")]
    IndexOutOfRange(usize, usize),
    #[error("malformed FASTA header at line {0}")]
    MalformedHeader(usize),
    #[error("FASTA record '{0}' has an empty sequence")]
    EmptySequence(String),
    #[error("invalid token id {0}")]
    InvalidTokenId(u32),
}

/// Sequence kind as declared in input data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SeqKind {
    Rna,
    Dna,
    Protein,
}

/// Nucleotide kind flag retained after tokenization (DNA is mapped onto the
/// RNA alphabet, the flag is what keeps the two apart downstream).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NucKind {
    Rna,
    Dna,
}

impl NucKind {
    pub fn index(self) -> usize {
        match self {
            NucKind::Rna => 0,
            NucKind::Dna => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VocabKind {
    Nucleotide,
    Protein,
}

/// A fixed token inventory with dense, stable ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    pub kind: VocabKind,
    tokens: Vec<&'static str>,
}

// Nucleotide token ids. Base tokens first, specials after; sos/mask/anc only
// exist for the baseline objectives.
pub const TOK_A: u32 = 0;
pub const TOK_C: u32 = 1;
pub const TOK_G: u32 = 2;
pub const TOK_U: u32 = 3;
pub const TOK_PAD: u32 = 4;
pub const TOK_EOS: u32 = 5;
pub const TOK_ANCL: u32 = 6;
pub const TOK_ANCR: u32 = 7;
pub const TOK_SOS: u32 = 8;
pub const TOK_MASK: u32 = 9;
pub const TOK_ANC: u32 = 10;

pub const NUC_BASES: [u32; 4] = [TOK_A, TOK_C, TOK_G, TOK_U];

const NUC_TOKENS: [&str; 11] = [
    "A", "C", "G", "U", "<pad>", "<eos>", "<ancl>", "<ancr>", "<sos>", "<mask>", "<anc>",
];

const PROT_TOKENS: [&str; 21] = [
    "A", "C", "D", "E", "F", "G", "H", "I", "K", "L", "M", "N", "P", "Q", "R", "S", "T", "V", "W",
    "Y", "<pad>",
];

impl Vocab {
    pub fn nucleotide() -> Self {
        Vocab {
            kind: VocabKind::Nucleotide,
            tokens: NUC_TOKENS.to_vec(),
        }
    }

    pub fn protein() -> Self {
        Vocab {
            kind: VocabKind::Protein,
            tokens: PROT_TOKENS.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn token(&self, id: u32) -> Result<&'static str, SeqError> {
        self.tokens
            .get(id as usize)
            .copied()
            .ok_or(SeqError::InvalidTokenId(id))
    }

    pub fn pad(&self) -> u32 {
        match self.kind {
            VocabKind::Nucleotide => TOK_PAD,
            VocabKind::Protein => 20,
        }
    }

    pub fn is_base(&self, id: u32) -> bool {
        match self.kind {
            VocabKind::Nucleotide => id < 4,
            VocabKind::Protein => id < 20,
        }
    }
}

/// A named sequence as read from FASTA.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqRecord {
    pub id: String,
    pub residues: String,
    pub kind: SeqKind,
}

impl SeqRecord {
    pub fn new(id: impl Into<String>, residues: impl Into<String>, kind: SeqKind) -> Self {
        SeqRecord {
            id: id.into(),
            residues: residues.into(),
            kind,
        }
    }
}

/// Tokenize a record against a vocabulary. Length is preserved; DNA `T`
/// maps onto the `U` token id and the kind flag is carried separately.
pub fn tokenize(record: &SeqRecord, vocab: &Vocab) -> Result<Vec<u32>, SeqError> {
    let mut out = Vec::with_capacity(record.residues.len());
    for (pos, ch) in record.residues.chars().enumerate() {
        let up = ch.to_ascii_uppercase();
        let id = match (vocab.kind, record.kind) {
            (VocabKind::Nucleotide, SeqKind::Rna) => match up {
                'A' => TOK_A,
                'C' => TOK_C,
                'G' => TOK_G,
                'U' => TOK_U,
                _ => return Err(SeqError::UnknownResidue(pos, ch)),
            },
            (VocabKind::Nucleotide, SeqKind::Dna) => match up {
                'A' => TOK_A,
                'C' => TOK_C,
                'G' => TOK_G,
                'T' => TOK_U,
                _ => return Err(SeqError::UnknownResidue(pos, ch)),
            },
            (VocabKind::Protein, SeqKind::Protein) => {
                match PROT_TOKENS[..20].iter().position(|t| t.chars().next() == Some(up)) {
                    Some(i) => i as u32,
                    None => return Err(SeqError::UnknownResidue(pos, ch)),
                }
            }
            _ => return Err(SeqError::UnknownResidue(pos, ch)),
        };
        out.push(id);
    }
    Ok(out)
}

/// Inverse of [`tokenize`] for base tokens; DNA renders the `U` token as `T`.
pub fn detokenize(ids: &[u32], kind: SeqKind) -> Result<String, SeqError> {
    let mut s = String::with_capacity(ids.len());
    for &id in ids {
        let ch = match kind {
            SeqKind::Rna | SeqKind::Dna => match id {
                TOK_A => 'A',
                TOK_C => 'C',
                TOK_G => 'G',
                TOK_U => {
                    if kind == SeqKind::Dna {
                        'T'
                    } else {
                        'U'
                    }
                }
                _ => return Err(SeqError::InvalidTokenId(id)),
            },
            SeqKind::Protein => {
                if (id as usize) < 20 {
                    PROT_TOKENS[id as usize].chars().next().unwrap()
                } else {
                    return Err(SeqError::InvalidTokenId(id));
                }
            }
        };
        s.push(ch);
    }
    Ok(s)
}

/// Which side of the anchor pair a token sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Anchor,
    Right,
}

/// A tokenized sequence with the anchor pair inserted.
///
/// Layout: `[eos?] x_{-m} .. x_{-1} <ancl> <ancr> x_0 .. x_n [eos?]`.
/// `anchor_slot` is the index of `<ancl>`; `<ancr>` always follows it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchoredSeq {
    pub tokens: Vec<u32>,
    pub anchor_slot: usize,
    pub side: Vec<Side>,
    pub kind_flag: NucKind,
}

impl AnchoredSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Count of left-side base tokens (m).
    pub fn m(&self) -> usize {
        self.count_side(Side::Left)
    }

    /// Count of right-side base tokens (n).
    pub fn n(&self) -> usize {
        self.count_side(Side::Right)
    }

    fn count_side(&self, side: Side) -> usize {
        self.tokens
            .iter()
            .zip(&self.side)
            .filter(|(t, s)| **s == side && **t < 4)
            .count()
    }

    /// Remove the anchor pair, recovering the surrounding token list.
    pub fn strip_anchors(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.tokens.len() - 2);
        out.extend_from_slice(&self.tokens[..self.anchor_slot]);
        out.extend_from_slice(&self.tokens[self.anchor_slot + 2..]);
        out
    }

    /// Copy with an eos token appended at both ends, the layout used for
    /// training targets.
    pub fn with_terminal_eos(&self) -> AnchoredSeq {
        let mut tokens = Vec::with_capacity(self.tokens.len() + 2);
        let mut side = Vec::with_capacity(self.side.len() + 2);
        tokens.push(TOK_EOS);
        side.push(Side::Left);
        tokens.extend_from_slice(&self.tokens);
        side.extend_from_slice(&self.side);
        tokens.push(TOK_EOS);
        side.push(Side::Right);
        AnchoredSeq {
            tokens,
            anchor_slot: self.anchor_slot + 1,
            side,
            kind_flag: self.kind_flag,
        }
    }
}

/// Insert the anchor pair after token index `after`; the token at `after`
/// becomes `x_{-1}`. `None` puts the anchors at the very start (all tokens
/// become right-side).
pub fn insert_anchors(
    tokens: &[u32],
    after: Option<usize>,
    kind_flag: NucKind,
) -> Result<AnchoredSeq, SeqError> {
    let split = match after {
        None => 0,
        Some(i) => {
            if i >= tokens.len() {
                return Err(SeqError::IndexOutOfRange(i, tokens.len()));
            }
            i + 1
        }
    };
    let mut out = Vec::with_capacity(tokens.len() + 2);
    let mut side = Vec::with_capacity(tokens.len() + 2);
    out.extend_from_slice(&tokens[..split]);
    side.extend(std::iter::repeat(Side::Left).take(split));
    out.push(TOK_ANCL);
    out.push(TOK_ANCR);
    side.push(Side::Anchor);
    side.push(Side::Anchor);
    out.extend_from_slice(&tokens[split..]);
    side.extend(std::iter::repeat(Side::Right).take(tokens.len() - split));
    Ok(AnchoredSeq {
        tokens: out,
        anchor_slot: split,
        side,
        kind_flag,
    })
}

/// Parse FASTA text. The sequence kind is inferred from the alphabet:
/// nucleotide records containing `T` are DNA, otherwise RNA; anything
/// outside the nucleotide alphabet is treated as protein.
pub fn read_fasta(text: &str) -> Result<Vec<SeqRecord>, SeqError> {
    let mut records: Vec<(String, String)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        if let Some(header) = line.strip_prefix('>') {
            records.push((header.trim().to_string(), String::new()));
        } else {
            match records.last_mut() {
                Some((_, seq)) => seq.push_str(line.trim()),
                None => return Err(SeqError::MalformedHeader(lineno + 1)),
            }
        }
    }
    records
        .into_iter()
        .map(|(id, residues)| {
            if residues.is_empty() {
                return Err(SeqError::EmptySequence(id));
            }
            let upper: String = residues.chars().map(|c| c.to_ascii_uppercase()).collect();
            let kind = if upper.chars().all(|c| "ACGU".contains(c)) {
                SeqKind::Rna
            } else if upper.chars().all(|c| "ACGT".contains(c)) {
                SeqKind::Dna
            } else {
                SeqKind::Protein
            };
            Ok(SeqRecord::new(id, upper, kind))
        })
        .collect()
}

/// Serialize records as FASTA with 60-column sequence lines.
pub fn write_fasta(records: &[SeqRecord]) -> String {
    let mut out = String::new();
    for rec in records {
        out.push('>');
        out.push_str(&rec.id);
        out.push('\n');
        for chunk in rec.residues.as_bytes().chunks(60) {
            out.push_str(std::str::from_utf8(chunk).unwrap());
            out.push('\n');
        }
    }
    out
}
