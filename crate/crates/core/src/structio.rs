//! Minimal PDB ingestion: per-residue N/CA/C backbone coordinates and the
//! protein sequence, enough to build frames.

use thiserror::Error;

use crate::frame::{frames_from_backbone, Frame, FrameError};

#[derive(Debug, Error, PartialEq)]
pub enum PdbError {
    #[error("chain '{0}' not found")]
    ChainNotFound(char),
    #[error("residue {0} is missing one of N/CA/C")]
    IncompleteResidue(i32),
    #[error("malformed ATOM record at line {0}")]
    MalformedAtomRecord(usize),
    #[error("non-standard residue '{0}'")]
    NonStandardResidue(String),
    #[error(transparent)]
    Frame(#[from] FrameError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneResidue {
    pub resname: String,
    pub resseq: i32,
    pub n: [f64; 3],
    pub ca: [f64; 3],
    pub c: [f64; 3],
}

/// Backbone atoms of one chain, in residue order.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneChain {
    pub chain_id: char,
    pub residues: Vec<BackboneResidue>,
    /// Records ignored for altloc or insertion codes.
    pub skipped_records: usize,
}

/// Column-exact ATOM parsing (1-based PDB columns): atom name 13-16,
/// altloc 17, resname 18-20, chain 22, resseq 23-26, insertion code 27,
/// x/y/z 31-54. First MODEL only; HETATM ignored; altloc other than ' ' or
/// 'A' and insertion-coded residues are skipped and counted.
pub fn parse_pdb_backbone(text: &str, chain: char) -> Result<BackboneChain, PdbError> {
    let mut chain_seen = false;
    let mut skipped = 0usize;
    // (resseq, resname, [n, ca, c])
    let mut residues: Vec<(i32, String, [Option<[f64; 3]>; 3])> = Vec::new();
    for (lineno0, line) in text.lines().enumerate() {
        let lineno = lineno0 + 1;
        if line.starts_with("ENDMDL") {
            break; // first model only
        }
        if !line.starts_with("ATOM  ") {
            continue;
        }
        if line.len() < 54 {
            return Err(PdbError::MalformedAtomRecord(lineno));
        }
        let col = |a: usize, b: usize| line.get(a - 1..b).unwrap_or("").trim().to_string();
        let atom_name = col(13, 16);
        let altloc = line.as_bytes()[16] as char;
        let resname = col(18, 20);
        let chain_id = line.as_bytes()[21] as char;
        let resseq: i32 = col(23, 26)
            .parse()
            .map_err(|_| PdbError::MalformedAtomRecord(lineno))?;
        let icode = line.as_bytes()[26] as char;
        if chain_id != chain {
            continue;
        }
        chain_seen = true;
        if altloc != ' ' && altloc != 'A' {
            skipped += 1;
            continue;
        }
        if icode != ' ' {
            skipped += 1;
            continue;
        }
        let slot = match atom_name.as_str() {
            "N" => 0,
            "CA" => 1,
            "C" => 2,
            _ => continue,
        };
        let coord = |a: usize, b: usize| -> Result<f64, PdbError> {
            col(a, b)
                .parse()
                .map_err(|_| PdbError::MalformedAtomRecord(lineno))
        };
        let xyz = [coord(31, 38)?, coord(39, 46)?, coord(47, 54)?];
        match residues.last_mut() {
            Some((seq, name, atoms)) if *seq == resseq && *name == resname => {
                if atoms[slot].is_none() {
                    atoms[slot] = Some(xyz);
                }
            }
            _ => {
                let mut atoms = [None; 3];
                atoms[slot] = Some(xyz);
                residues.push((resseq, resname, atoms));
            }
        }
    }
    if !chain_seen {
        return Err(PdbError::ChainNotFound(chain));
    }
    let mut out = Vec::with_capacity(residues.len());
    for (resseq, resname, atoms) in residues {
        let [n, ca, c] = atoms;
        match (n, ca, c) {
            (Some(n), Some(ca), Some(c)) => {
                out.push(BackboneResidue { resname, resseq, n, ca, c })
            }
            _ => return Err(PdbError::IncompleteResidue(resseq)),
        }
    }
    Ok(BackboneChain { chain_id: chain, residues: out, skipped_records: skipped })
}

const AA3_TO_ID: [(&str, u32); 20] = [
    ("ALA", 0),
    ("CYS", 1),
    ("ASP", 2),
    ("GLU", 3),
    ("PHE", 4),
    ("GLY", 5),
    ("HIS", 6),
    ("ILE", 7),
    ("LYS", 8),
    ("LEU", 9),
    ("MET", 10),
    ("ASN", 11),
    ("PRO", 12),
    ("GLN", 13),
    ("ARG", 14),
    ("SER", 15),
    ("THR", 16),
    ("VAL", 17),
    ("TRP", 18),
    ("TYR", 19),
];

pub fn resname_to_token(resname: &str) -> Result<u32, PdbError> {
    AA3_TO_ID
        .iter()
        .find(|(n, _)| *n == resname)
        .map(|(_, id)| *id)
        .ok_or_else(|| PdbError::NonStandardResidue(resname.to_string()))
}

/// Per-residue frames plus amino-acid token ids for the protein vocabulary.
pub fn chain_to_frames(chain: &BackboneChain) -> Result<(Vec<Frame<f64>>, Vec<u32>), PdbError> {
    let mut frames = Vec::with_capacity(chain.residues.len());
    let mut tokens = Vec::with_capacity(chain.residues.len());
    for r in &chain.residues {
        tokens.push(resname_to_token(&r.resname)?);
        frames.push(frames_from_backbone(r.n, r.ca, r.c)?);
    }
    Ok((frames, tokens))
}

/// TSV rendering: resseq, resname, 9 rotation entries row-major, 3
/// translation entries.
pub fn frames_tsv(chain: &BackboneChain) -> Result<String, PdbError> {
    let (frames, _) = chain_to_frames(chain)?;
    let mut out = String::from(
        "resseq\tresname\tr00\tr01\tr02\tr10\tr11\tr12\tr20\tr21\tr22\tt0\tt1\tt2\n",
    );
    for (res, f) in chain.residues.iter().zip(&frames) {
        out.push_str(&format!("{}\t{}", res.resseq, res.resname));
        for i in 0..3 {
            for j in 0..3 {
                out.push_str(&format!("\t{:.6}", f.r[i][j]));
            }
        }
        for t in f.t {
            out.push_str(&format!("\t{t:.6}"));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Render the retained subset back to ATOM records (testing aid; parsing
/// the output reproduces the chain).
pub fn chain_to_pdb(chain: &BackboneChain) -> String {
    let mut out = String::new();
    let mut serial = 1;
    for r in &chain.residues {
        for (name, xyz) in [("N", r.n), ("CA", r.ca), ("C", r.c)] {
            out.push_str(&format!(
                "ATOM  {serial:>5} {name:^4} {:>3} {}{:>4}    {:8.3}{:8.3}{:8.3}  1.00  0.00\n",
                r.resname, chain.chain_id, r.resseq, xyz[0], xyz[1], xyz[2]
            ));
            serial += 1;
        }
    }
    out
}
