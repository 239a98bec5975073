//! Line-delimited trace files. See `docs/trace_format.md` for the grammar.
//!
//! ```text
//! moek-trace v1 layers=2 experts_per_layer=8 top_k=2
//! 0 prefill 1,5;0,3
//! 1 decode 2,7;4,6
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{ExpertId, Phase, RoutingEvent, Trace};
use crate::error::{Error, Result};

const HEADER_TAG: &str = "moek-trace";
const VERSION: &str = "v1";

pub fn write_trace<W: Write>(mut w: W, trace: &Trace) -> Result<()> {
    writeln!(
        w,
        "{HEADER_TAG} {VERSION} layers={} experts_per_layer={} top_k={}",
        trace.layers(),
        trace.experts_per_layer(),
        trace.top_k()
    )?;
    let mut line = String::new();
    for ev in trace.events() {
        line.clear();
        line.push_str(&ev.token_index.to_string());
        line.push(' ');
        line.push_str(ev.phase.as_str());
        line.push(' ');
        for (l, sel) in ev.path.iter().enumerate() {
            if l > 0 {
                line.push(';');
            }
            for (i, e) in sel.iter().enumerate() {
                if i > 0 {
                    line.push(',');
                }
                line.push_str(&e.to_string());
            }
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn write_trace_file(path: impl AsRef<Path>, trace: &Trace) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_trace(&mut w, trace)?;
    w.flush()?;
    Ok(())
}

fn header_field(tok: Option<&str>, key: &str) -> Result<usize> {
    let tok = tok.ok_or_else(|| Error::Parse(format!("header is missing {key}")))?;
    let value = tok
        .strip_prefix(key)
        .and_then(|t| t.strip_prefix('='))
        .ok_or_else(|| Error::Parse(format!("expected {key}=<count>, got {tok:?}")))?;
    value
        .parse()
        .map_err(|_| Error::Parse(format!("bad {key} value {value:?}")))
}

fn parse_event(line: &str, lineno: usize) -> Result<RoutingEvent> {
    let err = |msg: String| Error::Parse(format!("line {lineno}: {msg}"));
    let mut parts = line.split_whitespace();
    let (Some(idx), Some(phase), Some(path), None) =
        (parts.next(), parts.next(), parts.next(), parts.next())
    else {
        return Err(err("expected `<token_index> <phase> <path>`".into()));
    };
    let token_index = idx
        .parse()
        .map_err(|_| err(format!("bad token index {idx:?}")))?;
    let phase: Phase = phase.parse().map_err(|e: Error| err(e.to_string()))?;
    let path = path
        .split(';')
        .map(|sel| {
            sel.split(',')
                .map(|e| {
                    e.parse::<ExpertId>()
                        .map_err(|_| err(format!("bad expert id {e:?}")))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RoutingEvent {
        token_index,
        phase,
        path,
    })
}

/// Parses a trace from any buffered reader. Blank lines and lines starting
/// with `#` are ignored.
pub fn parse_trace<R: BufRead>(r: R) -> Result<Trace> {
    let mut lines = r
        .lines()
        .enumerate()
        .map(|(n, l)| l.map(|l| (n + 1, l)))
        .filter(|res| {
            res.as_ref()
                .map_or(true, |(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        });
    let (_, header) = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::Parse("empty trace file".into()))?;
    let mut toks = header.split_whitespace();
    if toks.next() != Some(HEADER_TAG) || toks.next() != Some(VERSION) {
        return Err(Error::Parse(format!(
            "first line must start with `{HEADER_TAG} {VERSION}`"
        )));
    }
    let layers = header_field(toks.next(), "layers")?;
    let experts = header_field(toks.next(), "experts_per_layer")?;
    let top_k = header_field(toks.next(), "top_k")?;
    let mut events = Vec::new();
    for item in lines {
        let (n, line) = item?;
        events.push(parse_event(&line, n)?);
    }
    Trace::new(layers, experts, top_k, events).map_err(|e| match e {
        Error::Input(msg) | Error::Config(msg) => Error::Parse(msg),
        other => other,
    })
}

pub fn read_trace_file(path: impl AsRef<Path>) -> Result<Trace> {
    parse_trace(BufReader::new(File::open(path)?))
}
