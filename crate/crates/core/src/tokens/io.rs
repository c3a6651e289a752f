//! Line-oriented corpus interchange: one JSON object per line, a header
//! record first, gzip accepted via the `.gz` suffix. Floats are written with
//! round-trip precision so write-then-read is bit-exact.

use super::{TokenSet, Triplet};
use crate::{Error, Result};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Corpus-wide widths: `d` for tangible/intangible rows, `d_l` for the
/// image-feature row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub format: String,
    pub version: u32,
    pub d: usize,
    pub d_l: usize,
}

pub const CORPUS_FORMAT: &str = "semtok-corpus";

impl CorpusHeader {
    pub fn new(d: usize, d_l: usize) -> Self {
        CorpusHeader { format: CORPUS_FORMAT.to_string(), version: 1, d, d_l }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordJson {
    sample_id: String,
    d: usize,
    l: Vec<f64>,
    #[serde(rename = "V")]
    v: Vec<Vec<f64>>,
    #[serde(rename = "U")]
    u: Vec<Vec<f64>>,
    #[serde(rename = "E")]
    e: Vec<[usize; 3]>,
    #[serde(rename = "N")]
    n: IndexMap<String, Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    caption: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    captions: Option<Vec<Vec<u32>>>,
}

fn record_to_token_set(rec: RecordJson, line: usize) -> Result<TokenSet> {
    let captions = match (rec.caption, rec.captions) {
        (Some(c), None) => vec![c],
        (None, Some(cs)) => cs,
        (Some(_), Some(_)) => {
            return Err(Error::Parse { line, message: "both `caption` and `captions` present".to_string() })
        }
        (None, None) => return Err(Error::Parse { line, message: "missing field `caption`".to_string() }),
    };

    let nv = rec.v.len();
    let mut neighbors = vec![Vec::new(); nv];
    for (key, list) in rec.n {
        let a: usize = key
            .parse()
            .map_err(|_| Error::Parse { line, message: format!("N key `{key}` is not an index") })?;
        if a >= nv {
            return Err(Error::Validation {
                sample_id: rec.sample_id.clone(),
                field: format!("N.{a}"),
                message: format!("anchor {a} out of range for |V|={nv}"),
            });
        }
        neighbors[a] = list;
    }

    let ts = TokenSet {
        sample_id: rec.sample_id,
        d: rec.d,
        l: rec.l,
        tangible: rec.v,
        intangible: rec.u,
        triplets: rec.e.iter().map(|&[s, o, p]| Triplet { subject: s, object: o, predicate: p }).collect(),
        neighbors,
        captions,
    };
    ts.validate()?;
    Ok(ts)
}

fn token_set_to_record(ts: &TokenSet) -> RecordJson {
    let n: IndexMap<String, Vec<usize>> =
        ts.neighbors.iter().enumerate().map(|(a, list)| (a.to_string(), list.clone())).collect();
    let (caption, captions) = if ts.captions.len() == 1 {
        (Some(ts.captions[0].clone()), None)
    } else {
        (None, Some(ts.captions.clone()))
    };
    RecordJson {
        sample_id: ts.sample_id.clone(),
        d: ts.d,
        l: ts.l.clone(),
        v: ts.tangible.clone(),
        u: ts.intangible.clone(),
        e: ts.triplets.iter().map(|t| [t.subject, t.object, t.predicate]).collect(),
        n,
        caption,
        captions,
    }
}

/// Streaming corpus reader; iterate for validated [`TokenSet`]s.
pub struct CorpusReader {
    lines: std::io::Lines<BufReader<Box<dyn Read>>>,
    header: Option<CorpusHeader>,
    /// First line when it turned out to be a record, not a header.
    pending: Option<(usize, String)>,
    line_no: usize,
    /// Widths adopted from the header or the first record.
    widths: Option<(usize, usize)>,
}

impl CorpusReader {
    pub fn header(&self) -> Option<&CorpusHeader> {
        self.header.as_ref()
    }

    fn next_line(&mut self) -> Option<std::io::Result<(usize, String)>> {
        if let Some(p) = self.pending.take() {
            return Some(Ok(p));
        }
        loop {
            self.line_no += 1;
            match self.lines.next()? {
                Ok(s) if s.trim().is_empty() => continue,
                Ok(s) => return Some(Ok((self.line_no, s))),
                Err(e) => return Some(Err(e)),
            }
        }
    }

    fn parse_record(&mut self, line_no: usize, text: &str) -> Result<TokenSet> {
        let rec: RecordJson =
            serde_json::from_str(text).map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
        let ts = record_to_token_set(rec, line_no)?;
        let d_l = ts.l.len();
        match self.widths {
            None => self.widths = Some((ts.d, d_l)),
            Some((d, expected_d_l)) => {
                if ts.d != d || d_l != expected_d_l {
                    return Err(Error::Validation {
                        sample_id: ts.sample_id.clone(),
                        field: "d".to_string(),
                        message: format!("widths ({}, {d_l}) disagree with corpus ({d}, {expected_d_l})", ts.d),
                    });
                }
            }
        }
        Ok(ts)
    }
}

impl Iterator for CorpusReader {
    type Item = Result<TokenSet>;

    fn next(&mut self) -> Option<Self::Item> {
        match self.next_line()? {
            Ok((no, text)) => Some(self.parse_record(no, &text)),
            Err(e) => Some(Err(e.into())),
        }
    }
}

/// Opens a corpus file (gzip when the name ends in `.gz`) and positions the
/// reader after the header, if one is present.
pub fn read_corpus(path: impl AsRef<Path>) -> Result<CorpusReader> {
    let file = File::open(path.as_ref())?;
    let raw: Box<dyn Read> = if path.as_ref().extension().is_some_and(|e| e == "gz") {
        Box::new(GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    let mut reader = CorpusReader {
        lines: BufReader::new(raw).lines(),
        header: None,
        pending: None,
        line_no: 0,
        widths: None,
    };

    match reader.next_line() {
        None => {}
        Some(Err(e)) => return Err(e.into()),
        Some(Ok((no, text))) => {
            if let Ok(h) = serde_json::from_str::<CorpusHeader>(&text) {
                if h.format != CORPUS_FORMAT {
                    return Err(Error::Parse { line: no, message: format!("unknown corpus format `{}`", h.format) });
                }
                reader.widths = Some((h.d, h.d_l));
                reader.header = Some(h);
            } else {
                // Headerless corpora adopt widths from their first record.
                reader.pending = Some((no, text));
            }
        }
    }
    Ok(reader)
}

/// Writes a header followed by one record per line. An empty input produces
/// an empty file. Gzip output when the name ends in `.gz`.
pub fn write_corpus<'a>(sets: impl IntoIterator<Item = &'a TokenSet>, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut out: Box<dyn Write> = if path.as_ref().extension().is_some_and(|e| e == "gz") {
        Box::new(BufWriter::new(GzEncoder::new(file, flate2::Compression::default())))
    } else {
        Box::new(BufWriter::new(file))
    };

    let mut header_written = false;
    for ts in sets {
        ts.validate()?;
        if !header_written {
            let header = CorpusHeader::new(ts.d, ts.l.len());
            serde_json::to_writer(&mut out, &header).map_err(io_from_json)?;
            out.write_all(b"\n")?;
            header_written = true;
        }
        serde_json::to_writer(&mut out, &token_set_to_record(ts)).map_err(io_from_json)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn io_from_json(e: serde_json::Error) -> Error {
    Error::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}
