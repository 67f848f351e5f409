use std::fmt::Write as _;

use super::{AgentTrace, ArgMap, EventKind, OutcomeClass, TraceError, TraceEvent};

/// Parses one trace file.
pub fn parse_trace(content: &str) -> Result<AgentTrace, TraceError> {
    let mut events = Vec::new();
    for (idx, raw) in content.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let ev = parse_line(line).map_err(|message| TraceError::Parse {
            line: idx + 1,
            message,
        })?;
        if let Some(prev) = events.last().map(|e: &TraceEvent| e.timestamp) {
            if ev.timestamp < prev {
                return Err(TraceError::TimestampRegression {
                    line: idx + 1,
                    t: ev.timestamp,
                    prev,
                });
            }
        }
        events.push(ev);
    }
    AgentTrace::from_events(events)
}

/// Renders a trace in the same format [`parse_trace`] reads.
pub fn write_trace(trace: &AgentTrace) -> String {
    let mut out = String::new();
    for ev in &trace.events {
        let _ = write!(out, "t={} kind={}", ev.timestamp, ev.kind);
        if let Some(tool) = &ev.tool {
            let _ = write!(out, " tool={}", escape(tool));
        }
        if let Some(outcome) = ev.outcome {
            let _ = write!(out, " outcome={outcome}");
        }
        if ev.kind == EventKind::ToolCall {
            let _ = write!(out, " args={}", render_map(&ev.args));
        }
        if let Some(result) = &ev.result {
            let _ = write!(out, " result={}", render_map(result));
        }
        out.push('\n');
    }
    out
}

fn needs_quotes(s: &str) -> bool {
    s.is_empty()
        || s
            .chars()
            .any(|c| c.is_whitespace() || matches!(c, ',' | '{' | '}' | ':' | '"' | '\\' | '='))
}

fn escape(s: &str) -> String {
    if !needs_quotes(s) {
        return s.to_string();
    }
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        if c == '"' || c == '\\' {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('"');
    out
}

fn render_map(map: &ArgMap) -> String {
    let body: Vec<String> = map
        .iter()
        .map(|(k, v)| format!("{}:{}", escape(k), escape(v)))
        .collect();
    format!("{{{}}}", body.join(","))
}

struct Cursor<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
}

impl<'a> Cursor<'a> {
    fn new(s: &'a str) -> Self {
        Self {
            chars: s.chars().peekable(),
        }
    }

    fn skip_ws(&mut self) {
        while self.chars.peek().is_some_and(|c| c.is_whitespace()) {
            self.chars.next();
        }
    }

    fn at_end(&mut self) -> bool {
        self.skip_ws();
        self.chars.peek().is_none()
    }

    /// Reads a plain or quoted atom, stopping at any char in `stop`.
    fn atom(&mut self, stop: &[char]) -> Result<String, String> {
        if self.chars.peek() == Some(&'"') {
            self.chars.next();
            let mut out = String::new();
            loop {
                match self.chars.next() {
                    Some('\\') => match self.chars.next() {
                        Some(c) => out.push(c),
                        None => return Err("unterminated escape".into()),
                    },
                    Some('"') => return Ok(out),
                    Some(c) => out.push(c),
                    None => return Err("unterminated quoted value".into()),
                }
            }
        }
        let mut out = String::new();
        while let Some(&c) = self.chars.peek() {
            if c.is_whitespace() || stop.contains(&c) {
                break;
            }
            out.push(c);
            self.chars.next();
        }
        Ok(out)
    }

    fn expect(&mut self, want: char) -> Result<(), String> {
        match self.chars.next() {
            Some(c) if c == want => Ok(()),
            Some(c) => Err(format!("expected `{want}`, found `{c}`")),
            None => Err(format!("expected `{want}`, found end of line")),
        }
    }

    fn map(&mut self) -> Result<ArgMap, String> {
        self.expect('{')?;
        let mut map = ArgMap::new();
        loop {
            self.skip_ws();
            if self.chars.peek() == Some(&'}') {
                self.chars.next();
                return Ok(map);
            }
            let key = self.atom(&[':', ',', '}'])?;
            if key.is_empty() {
                return Err("empty key in map".into());
            }
            self.expect(':')?;
            let value = self.atom(&[',', '}'])?;
            if map.insert(key.clone(), value).is_some() {
                return Err(format!("duplicate key `{key}`"));
            }
            self.skip_ws();
            match self.chars.peek() {
                Some(',') => {
                    self.chars.next();
                }
                Some('}') => {}
                _ => return Err("expected `,` or `}` in map".into()),
            }
        }
    }
}

fn parse_line(line: &str) -> Result<TraceEvent, String> {
    let mut cur = Cursor::new(line);
    let mut timestamp = None;
    let mut kind = None;
    let mut tool = None;
    let mut outcome = None;
    let mut args = None;
    let mut result = None;
    while !cur.at_end() {
        let key = cur.atom(&['='])?;
        cur.expect('=')?;
        match key.as_str() {
            "t" => {
                let v = cur.atom(&[])?;
                let t: f64 = v.parse().map_err(|_| format!("bad timestamp `{v}`"))?;
                if !t.is_finite() {
                    return Err(format!("bad timestamp `{v}`"));
                }
                timestamp = Some(t);
            }
            "kind" => kind = Some(cur.atom(&[])?.parse::<EventKind>()?),
            "tool" => tool = Some(cur.atom(&[])?),
            "outcome" => outcome = Some(cur.atom(&[])?.parse::<OutcomeClass>()?),
            "args" => args = Some(cur.map()?),
            "result" => result = Some(cur.map()?),
            other => return Err(format!("unknown field `{other}`")),
        }
    }
    let timestamp = timestamp.ok_or("missing `t`")?;
    let kind = kind.ok_or("missing `kind`")?;
    if kind.is_tool() && tool.as_deref().is_none_or(str::is_empty) {
        return Err(format!("{kind} requires `tool`"));
    }
    if !kind.is_tool() && tool.is_some() {
        return Err(format!("{kind} must not carry `tool`"));
    }
    let outcome = match kind {
        EventKind::ToolReturn => Some(outcome.unwrap_or(OutcomeClass::Success)),
        _ => outcome,
    };
    Ok(TraceEvent {
        timestamp,
        kind,
        tool,
        signature: None,
        outcome,
        args: args.unwrap_or_default(),
        result: if kind == EventKind::ToolReturn {
            Some(result.unwrap_or_default())
        } else {
            result
        },
    })
}
