//! Plain-text token dumps: one step per line, eight integer ids separated by
//! spaces (four score ids, then four performance ids).
//!
//! Cached datasets use the same format for tokens, a parallel file with four
//! floats per line for the expressive parameters, and a JSON index.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::token::{CompoundToken, EcpSequence};

pub fn write_tokens(tokens: &[CompoundToken], out: &mut impl Write) -> std::io::Result<()> {
    for t in tokens {
        let ids = t.ids();
        writeln!(
            out,
            "{} {} {} {} {} {} {} {}",
            ids[0], ids[1], ids[2], ids[3], ids[4], ids[5], ids[6], ids[7]
        )?;
    }
    Ok(())
}

pub fn tokens_to_string(tokens: &[CompoundToken]) -> String {
    let mut buf = Vec::new();
    write_tokens(tokens, &mut buf).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("ascii")
}

fn parse_fields<T: std::str::FromStr, const N: usize>(line: &str, lineno: usize) -> Result<[T; N]> {
    let mut out = Vec::with_capacity(N);
    for field in line.split_whitespace() {
        let v = field.parse::<T>().map_err(|_| Error::Dump {
            line: lineno,
            msg: format!("cannot parse {field:?}"),
        })?;
        out.push(v);
    }
    let found = out.len();
    out.try_into().map_err(|_| Error::Dump {
        line: lineno,
        msg: format!("expected {N} fields, found {found}"),
    })
}

/// Parses a token dump. Blank lines and lines starting with `#` are skipped.
pub fn parse_tokens(text: &str) -> Result<Vec<CompoundToken>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| parse_fields::<u32, 8>(l, i + 1).map(CompoundToken::from_ids))
        .collect()
}

pub fn read_token_file(path: &Path) -> Result<EcpSequence> {
    let tokens = parse_tokens(&fs::read_to_string(path)?)?;
    Ok(EcpSequence::from_tokens(tokens))
}

pub fn write_token_file(seq: &EcpSequence, path: &Path) -> Result<()> {
    fs::write(path, tokens_to_string(&seq.tokens))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub piece: String,
    pub split: String,
    pub note_start: usize,
    pub row: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheIndex {
    pub fingerprint: String,
    pub segments: Vec<CacheEntry>,
}

pub const TOKENS_FILE: &str = "tokens.txt";
pub const PV_FILE: &str = "pv.txt";
pub const INDEX_FILE: &str = "index.json";

/// Writes sequences as a token dump, a parallel parameter dump and an index.
pub fn write_cache(dir: &Path, index: &CacheIndex, sequences: &[&EcpSequence]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tokens = std::io::BufWriter::new(fs::File::create(dir.join(TOKENS_FILE))?);
    let mut pv = std::io::BufWriter::new(fs::File::create(dir.join(PV_FILE))?);
    for seq in sequences {
        write_tokens(&seq.tokens, &mut tokens)?;
        for r in &seq.pv {
            writeln!(pv, "{} {} {} {}", r[0], r[1], r[2], r[3])?;
        }
    }
    tokens.flush()?;
    pv.flush()?;
    fs::write(dir.join(INDEX_FILE), serde_json::to_vec_pretty(index)?)?;
    Ok(())
}

pub fn read_cache(dir: &Path) -> Result<(CacheIndex, Vec<EcpSequence>)> {
    let index: CacheIndex = serde_json::from_slice(&fs::read(dir.join(INDEX_FILE))?)?;
    let tokens = parse_tokens(&fs::read_to_string(dir.join(TOKENS_FILE))?)?;
    let pv_text = fs::read_to_string(dir.join(PV_FILE))?;
    let pv: Vec<[f32; 4]> = pv_text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_fields::<f32, 4>(l, i + 1))
        .collect::<Result<_>>()?;
    if pv.len() != tokens.len() {
        return Err(Error::Dump {
            line: pv.len().min(tokens.len()),
            msg: format!("{} token rows but {} parameter rows", tokens.len(), pv.len()),
        });
    }
    let mut out = Vec::with_capacity(index.segments.len());
    for e in &index.segments {
        let end = e.row + e.len;
        if end > tokens.len() {
            return Err(Error::Dump {
                line: end,
                msg: format!("segment of {} overruns the dump", e.piece),
            });
        }
        out.push(EcpSequence {
            tokens: tokens[e.row..end].to_vec(),
            pv: pv[e.row..end].to_vec(),
        });
    }
    Ok((index, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::token::BeatPosition;
    use proptest::prelude::*;

    #[test]
    fn parses_and_reports_errors() {
        let text = "# header\n1 0 0 0 0 0 0 0\n\n3 1 0 0 0 0 0 0\n";
        let toks = parse_tokens(text).unwrap();
        assert_eq!(toks, vec![CompoundToken::bos(), CompoundToken::metric(BeatPosition::Beat)]);
        match parse_tokens("1 0 0\n") {
            Err(Error::Dump { line: 1, msg }) => assert!(msg.contains("expected 8")),
            other => panic!("{other:?}"),
        }
        assert!(parse_tokens("1 0 0 0 0 0 0 x\n").is_err());
    }

    proptest! {
        #[test]
        fn dump_round_trip(ids in proptest::collection::vec(proptest::array::uniform8(0u32..200), 0..40)) {
            let toks: Vec<CompoundToken> = ids.into_iter().map(CompoundToken::from_ids).collect();
            prop_assert_eq!(parse_tokens(&tokens_to_string(&toks)).unwrap(), toks);
        }
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = EcpSequence {
            tokens: vec![CompoundToken::bos(), CompoundToken::eos()],
            pv: vec![[0.0; 4], [0.0; 4]],
        };
        let b = EcpSequence {
            tokens: vec![
                CompoundToken::bos(),
                CompoundToken::metric(BeatPosition::Beat),
                CompoundToken::note(60, 3, None),
            ],
            pv: vec![[0.0; 4], [0.0; 4], [0.123_456_78, 64.0, -0.1, 1.5]],
        };
        let index = CacheIndex {
            fingerprint: "f".into(),
            segments: vec![
                CacheEntry { piece: "p".into(), split: "train".into(), note_start: 0, row: 0, len: 2 },
                CacheEntry { piece: "q".into(), split: "test".into(), note_start: 16, row: 2, len: 3 },
            ],
        };
        write_cache(dir.path(), &index, &[&a, &b]).unwrap();
        let (idx, seqs) = read_cache(dir.path()).unwrap();
        assert_eq!(idx, index);
        assert_eq!(seqs, vec![a, b]);
    }
}
