//! Line-oriented corpus file format.
//!
//! ```text
//! M2C1<TAB>count=N<TAB>vocab=..<TAB>speakers=..<TAB>...
//! id=u000001<TAB>spk=3<TAB>split=train<TAB>tokens=1,5<TAB>dur=2,3<TAB>pitch=..<TAB>energy=..<TAB>style=..<TAB>text=..<TAB>frames=<base64>
//! ```
//!
//! One utterance per line, every line newline-terminated. Frames are the
//! little-endian f32 payload of the `[frames x d_mel]` matrix, base64
//! encoded. Text escapes backslash, tab, CR and LF.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;

use super::{Corpus, CorpusSpec, Split, UtteranceRecord};
use crate::tensor::Tensor;

pub const CORPUS_MAGIC: &str = "M2C1";

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("invalid corpus spec: {0}")]
    Spec(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}, byte offset {offset}: {reason}")]
    Parse {
        line: usize,
        offset: usize,
        reason: String,
    },
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            _ => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut it = s.chars();
    while let Some(c) = it.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match it.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            other => return Err(format!("bad escape sequence \\{}", other.map(String::from).unwrap_or_default())),
        }
    }
    Ok(out)
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

pub fn write_corpus<W: Write>(corpus: &Corpus, w: &mut W) -> std::io::Result<()> {
    let s = &corpus.spec;
    writeln!(
        w,
        "{CORPUS_MAGIC}\tcount={}\tvocab={}\tspeakers={}\tutterances={}\tmin_tokens={}\tmax_tokens={}\td_mel={}\tseed={}\tstyle_std={}\tdigit_rate={}\ttest_speakers={}",
        corpus.records.len(),
        s.vocab_size,
        s.n_speakers,
        s.n_utterances,
        s.min_tokens,
        s.max_tokens,
        s.d_mel,
        s.seed,
        s.style_std,
        s.digit_rate,
        s.test_speakers
    )?;
    for r in &corpus.records {
        let mut payload = Vec::with_capacity(r.frames.len() * 4);
        for v in r.frames.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        writeln!(
            w,
            "id={}\tspk={}\tsplit={}\ttokens={}\tdur={}\tpitch={}\tenergy={}\tstyle={}\ttext={}\tframes={}",
            escape(&r.utterance_id),
            r.speaker_id,
            r.split.as_str(),
            join(&r.token_ids),
            join(&r.durations),
            join(&r.pitch),
            join(&r.energy),
            r.style,
            escape(&r.text),
            STANDARD.encode(&payload)
        )?;
    }
    Ok(())
}

pub fn save_records(corpus: &Corpus, path: &Path) -> Result<(), CorpusError> {
    let io = |source| CorpusError::Io {
        path: path.to_owned(),
        source,
    };
    let mut buf = Vec::new();
    write_corpus(corpus, &mut buf).map_err(io)?;
    fs::write(path, buf).map_err(io)
}

pub fn load_records(path: &Path) -> Result<Corpus, CorpusError> {
    let bytes = fs::read(path).map_err(|source| CorpusError::Io {
        path: path.to_owned(),
        source,
    })?;
    parse_corpus(&bytes)
}

struct Cursor {
    line: usize,
    offset: usize,
}

impl Cursor {
    fn err(&self, reason: impl Into<String>) -> CorpusError {
        CorpusError::Parse {
            line: self.line,
            offset: self.offset,
            reason: reason.into(),
        }
    }
}

/// Splits `line` into `key=value` fields, returning each with its byte
/// offset relative to the line start.
fn fields(line: &str) -> Vec<(usize, &str, Option<&str>)> {
    let mut out = Vec::new();
    let mut pos = 0;
    for f in line.split('\t') {
        match f.split_once('=') {
            Some((k, v)) => out.push((pos, k, Some(v))),
            None => out.push((pos, f, None)),
        }
        pos += f.len() + 1;
    }
    out
}

fn parse_list<T: std::str::FromStr>(v: &str) -> Result<Vec<T>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|x| x.parse::<T>().map_err(|_| format!("cannot parse {x:?}")))
        .collect()
}

fn parse_header(line: &str, cur: &Cursor) -> Result<(CorpusSpec, usize), CorpusError> {
    let fs = fields(line);
    if fs.first().map(|f| f.1) != Some(CORPUS_MAGIC) || fs[0].2.is_some() {
        return Err(cur.err(format!("missing {CORPUS_MAGIC} header")));
    }
    let mut spec = CorpusSpec::default();
    let mut count = None;
    for &(off, key, value) in &fs[1..] {
        let at = Cursor {
            line: cur.line,
            offset: cur.offset + off,
        };
        let value = value.ok_or_else(|| at.err(format!("header field {key:?} has no value")))?;
        let bad = |_| at.err(format!("header field {key}={value:?} is invalid"));
        match key {
            "count" => count = Some(value.parse().map_err(bad)?),
            "vocab" => spec.vocab_size = value.parse().map_err(bad)?,
            "speakers" => spec.n_speakers = value.parse().map_err(bad)?,
            "utterances" => spec.n_utterances = value.parse().map_err(bad)?,
            "min_tokens" => spec.min_tokens = value.parse().map_err(bad)?,
            "max_tokens" => spec.max_tokens = value.parse().map_err(bad)?,
            "d_mel" => spec.d_mel = value.parse().map_err(bad)?,
            "seed" => spec.seed = value.parse().map_err(bad)?,
            "test_speakers" => spec.test_speakers = value.parse().map_err(bad)?,
            "style_std" => spec.style_std = value.parse().map_err(|_| at.err(format!("bad style_std {value:?}")))?,
            "digit_rate" => spec.digit_rate = value.parse().map_err(|_| at.err(format!("bad digit_rate {value:?}")))?,
            _ => return Err(at.err(format!("unknown header field {key:?}"))),
        }
    }
    let count = count.ok_or_else(|| cur.err("header lacks count"))?;
    if spec.d_mel == 0 || spec.vocab_size == 0 {
        return Err(cur.err("d_mel and vocab must be positive"));
    }
    Ok((spec, count))
}

const RECORD_KEYS: [&str; 10] = [
    "id", "spk", "split", "tokens", "dur", "pitch", "energy", "style", "text", "frames",
];

fn parse_record(line: &str, cur: &Cursor, spec: &CorpusSpec) -> Result<UtteranceRecord, CorpusError> {
    let fs = fields(line);
    if fs.len() != RECORD_KEYS.len() {
        return Err(cur.err(format!("expected {} fields, found {}", RECORD_KEYS.len(), fs.len())));
    }
    let mut vals = [""; 10];
    for (i, &(off, key, value)) in fs.iter().enumerate() {
        let at = Cursor {
            line: cur.line,
            offset: cur.offset + off,
        };
        if key != RECORD_KEYS[i] {
            return Err(at.err(format!("expected field {:?}, found {key:?}", RECORD_KEYS[i])));
        }
        vals[i] = value.ok_or_else(|| at.err(format!("field {key:?} has no value")))?;
    }
    let field_err = |i: usize, reason: String| {
        CorpusError::Parse {
            line: cur.line,
            offset: cur.offset + fs[i].0,
            reason: format!("{}: {reason}", RECORD_KEYS[i]),
        }
    };
    let utterance_id = unescape(vals[0]).map_err(|e| field_err(0, e))?;
    let speaker_id: usize = vals[1].parse().map_err(|_| field_err(1, format!("bad speaker {:?}", vals[1])))?;
    let split = match vals[2] {
        "train" => Split::Train,
        "test" => Split::Test,
        other => return Err(field_err(2, format!("unknown split {other:?}"))),
    };
    let token_ids: Vec<usize> = parse_list(vals[3]).map_err(|e| field_err(3, e))?;
    if token_ids.is_empty() {
        return Err(field_err(3, "empty token sequence".into()));
    }
    if let Some(&t) = token_ids.iter().find(|&&t| t >= spec.vocab_size) {
        return Err(field_err(3, format!("token {t} outside vocab {}", spec.vocab_size)));
    }
    let n = token_ids.len();
    let durations: Vec<usize> = parse_list(vals[4]).map_err(|e| field_err(4, e))?;
    let pitch: Vec<f32> = parse_list(vals[5]).map_err(|e| field_err(5, e))?;
    let energy: Vec<f32> = parse_list(vals[6]).map_err(|e| field_err(6, e))?;
    for (i, len) in [(4, durations.len()), (5, pitch.len()), (6, energy.len())] {
        if len != n {
            return Err(field_err(i, format!("length {len} != token count {n}")));
        }
    }
    let style: f32 = vals[7].parse().map_err(|_| field_err(7, format!("bad value {:?}", vals[7])))?;
    let text = unescape(vals[8]).map_err(|e| field_err(8, e))?;
    let payload = STANDARD.decode(vals[9]).map_err(|e| field_err(9, e.to_string()))?;
    let n_frames: usize = durations.iter().sum();
    let expect = n_frames
        .checked_mul(spec.d_mel)
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| field_err(4, "duration sum overflows".into()))?;
    if n_frames == 0 || payload.len() != expect {
        return Err(field_err(
            9,
            format!("{} payload bytes, expected {expect} for {n_frames} frames x {} bins", payload.len(), spec.d_mel),
        ));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(UtteranceRecord {
        utterance_id,
        speaker_id,
        split,
        token_ids,
        durations,
        pitch,
        energy,
        style,
        text,
        frames: Tensor::new(vec![n_frames, spec.d_mel], data).expect("checked length"),
    })
}

/// Parses a whole corpus file. Errors carry the 1-based line number and
/// the byte offset of the offending field.
pub fn parse_corpus(bytes: &[u8]) -> Result<Corpus, CorpusError> {
    let text = std::str::from_utf8(bytes).map_err(|e| CorpusError::Parse {
        line: 1 + bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count(),
        offset: e.valid_up_to(),
        reason: "invalid UTF-8".into(),
    })?;
    let mut offset = 0;
    let mut spec_count: Option<(CorpusSpec, usize)> = None;
    let mut records = Vec::new();
    for (i, raw) in text.split_inclusive('\n').enumerate() {
        let cur = Cursor { line: i + 1, offset };
        let Some(line) = raw.strip_suffix('\n') else {
            return Err(cur.err("truncated line (missing newline)"));
        };
        match &spec_count {
            None => spec_count = Some(parse_header(line, &cur)?),
            Some((spec, count)) => {
                if records.len() == *count {
                    return Err(cur.err(format!("more records than header count {count}")));
                }
                records.push(parse_record(line, &cur, spec)?);
            }
        }
        offset += raw.len();
    }
    let Some((spec, count)) = spec_count else {
        return Err(CorpusError::Parse {
            line: 1,
            offset: 0,
            reason: "empty file: missing header".into(),
        });
    };
    if records.len() != count {
        return Err(CorpusError::Parse {
            line: records.len() + 2,
            offset,
            reason: format!("truncated: header promises {count} records, found {}", records.len()),
        });
    }
    Ok(Corpus { spec, records })
}

#[cfg(test)]
mod tests {
    use super::super::generate_corpus;
    use super::*;

    fn corpus() -> Corpus {
        let spec = CorpusSpec {
            n_speakers: 3,
            n_utterances: 12,
            test_speakers: 1,
            digit_rate: 0.0,
            ..CorpusSpec::default()
        };
        generate_corpus(&spec).unwrap().0
    }

    fn bytes(c: &Corpus) -> Vec<u8> {
        let mut b = Vec::new();
        write_corpus(c, &mut b).unwrap();
        b
    }

    #[test]
    fn round_trip() {
        let c = corpus();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.m2c");
        save_records(&c, &p).unwrap();
        assert_eq!(load_records(&p).unwrap(), c);
    }

    #[test]
    fn escaped_text_round_trips() {
        let mut c = corpus();
        c.records[0].text = "tab\there\\back\nnew\rline".into();
        assert_eq!(parse_corpus(&bytes(&c)).unwrap(), c);
    }

    #[test]
    fn empty_corpus_is_header_only() {
        let c = Corpus { spec: CorpusSpec::default(), records: vec![] };
        let b = bytes(&c);
        assert_eq!(b.iter().filter(|&&x| x == b'\n').count(), 1);
        assert!(b.starts_with(b"M2C1\tcount=0"));
        assert_eq!(parse_corpus(&b).unwrap(), c);
    }

    #[test]
    fn truncation_reports_offset() {
        let b = bytes(&corpus());
        // cut inside the last record
        let cut = b.len() - 10;
        match parse_corpus(&b[..cut]) {
            Err(CorpusError::Parse { line, offset, .. }) => {
                assert_eq!(line, 13);
                let last_start = b[..b.len() - 1].iter().rposition(|&x| x == b'\n').unwrap() + 1;
                assert_eq!(offset, last_start);
            }
            other => panic!("{other:?}"),
        }
        // cut exactly at a record boundary: the count catches it
        let boundary = b[..b.len() - 1].iter().rposition(|&x| x == b'\n').unwrap() + 1;
        match parse_corpus(&b[..boundary]) {
            Err(CorpusError::Parse { offset, reason, .. }) => {
                assert_eq!(offset, boundary);
                assert!(reason.contains("truncated"), "{reason}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_record_names_its_line() {
        let b = String::from_utf8(bytes(&corpus())).unwrap();
        let bad = b.replacen("split=train", "split=dev", 1);
        let err = parse_corpus(bad.as_bytes()).unwrap_err().to_string();
        assert!(err.starts_with("line 2,"), "{err}");
        assert!(err.contains("unknown split"), "{err}");
        let bad = b.replacen("dur=", "dur=99,", 1);
        assert!(parse_corpus(bad.as_bytes()).is_err());
        assert!(parse_corpus(b"").is_err());
        assert!(parse_corpus(b"M2C0\tcount=0\n").is_err());
    }
}
