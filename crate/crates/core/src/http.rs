//! HTTP/1.x message heads, enough to find content types, request targets
//! and header names.

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

const METHODS: [&[u8]; 9] = [
    b"GET ", b"POST ", b"PUT ", b"HEAD ", b"DELETE ", b"OPTIONS ", b"PATCH ", b"CONNECT ", b"TRACE ",
];
const MAX_HEAD: usize = 64 * 1024;

pub fn looks_like_http(stream: &[u8]) -> bool {
    stream.starts_with(b"HTTP/1.") || METHODS.iter().any(|m| stream.starts_with(m))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StartLine {
    Request { method: String, target: String },
    Response { status: u16 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Head {
    pub start: StartLine,
    pub headers: Vec<(String, String)>,
    /// Length of the head including the blank line.
    pub len: usize,
}

impl Head {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    /// Media type without parameters, lowercased.
    pub fn content_type(&self) -> Option<String> {
        let v = self.header("content-type")?;
        let t = v.split(';').next()?.trim().to_ascii_lowercase();
        (!t.is_empty()).then_some(t)
    }
}

fn find_head_end(buf: &[u8]) -> Option<usize> {
    buf.windows(4).take(MAX_HEAD).position(|w| w == b"\r\n\r\n").map(|p| p + 4)
}

/// Parses a message head at the start of `buf`.
pub fn parse_head(buf: &[u8]) -> Option<Head> {
    if !looks_like_http(buf) {
        return None;
    }
    let len = find_head_end(buf)?;
    let text = core::str::from_utf8(&buf[..len - 4]).ok()?;
    let mut lines = text.split("\r\n");
    let first = lines.next()?;
    let start = if let Some(rest) = first.strip_prefix("HTTP/1.") {
        let status = rest.get(2..)?.trim_start().get(..3)?.parse().ok()?;
        StartLine::Response { status }
    } else {
        let mut parts = first.splitn(3, ' ');
        let method = parts.next()?.into();
        let target = parts.next()?.into();
        StartLine::Request { method, target }
    };
    let headers = lines
        .filter_map(|l| {
            let (k, v) = l.split_once(':')?;
            Some((k.trim().into(), v.trim().into()))
        })
        .collect();
    Some(Head { start, headers, len })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Message {
    pub head: Head,
    /// Body bytes relative to the stream start; chunked bodies point at the
    /// raw chunked encoding.
    pub body: Range<usize>,
}

/// Splits a stream into consecutive HTTP messages. Stops at the first
/// thing that is not a message head.
pub fn messages(stream: &[u8]) -> Vec<Message> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < stream.len() {
        let Some(head) = parse_head(&stream[pos..]) else { break };
        let body_start = pos + head.len;
        let is_head_only = matches!(head.start, StartLine::Response { status } if status == 204 || status == 304 || (100..200).contains(&status));
        let body_end = if is_head_only {
            body_start
        } else if let Some(n) = head.header("content-length").and_then(|v| v.parse::<usize>().ok()) {
            (body_start + n).min(stream.len())
        } else if head
            .header("transfer-encoding")
            .is_some_and(|v| v.to_ascii_lowercase().contains("chunked"))
        {
            chunked_end(stream, body_start)
        } else if matches!(head.start, StartLine::Request { .. }) {
            body_start
        } else {
            stream.len()
        };
        out.push(Message {
            head,
            body: body_start..body_end,
        });
        if body_end <= pos {
            break;
        }
        pos = body_end;
    }
    out
}

fn chunked_end(stream: &[u8], mut pos: usize) -> usize {
    loop {
        let Some(line_end) = stream[pos..].windows(2).position(|w| w == b"\r\n") else {
            return stream.len();
        };
        let size_str = core::str::from_utf8(&stream[pos..pos + line_end]).unwrap_or("");
        let size_hex = size_str.split(';').next().unwrap_or("").trim();
        let Ok(size) = usize::from_str_radix(size_hex, 16) else {
            return stream.len();
        };
        pos += line_end + 2;
        if size == 0 {
            // Trailers end at the next blank line.
            return match stream[pos..].windows(2).position(|w| w == b"\r\n") {
                Some(p) if p == 0 => pos + 2,
                _ => find_head_end(&stream[pos..]).map(|e| pos + e).unwrap_or(stream.len()),
            };
        }
        pos = (pos + size + 2).min(stream.len());
        if pos >= stream.len() {
            return stream.len();
        }
    }
}

/// De-chunks a chunked body; non-chunked input is returned unchanged.
pub fn dechunk(raw: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < raw.len() {
        let Some(line_end) = raw[pos..].windows(2).position(|w| w == b"\r\n") else { break };
        let size_str = core::str::from_utf8(&raw[pos..pos + line_end]).unwrap_or("");
        let Ok(size) = usize::from_str_radix(size_str.split(';').next().unwrap_or("").trim(), 16) else {
            return raw.to_vec();
        };
        pos += line_end + 2;
        if size == 0 {
            break;
        }
        let end = (pos + size).min(raw.len());
        out.extend_from_slice(&raw[pos..end]);
        pos = end + 2;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn response_content_type() {
        let s = b"HTTP/1.1 200 OK\r\nContent-Type: text/html; charset=utf-8\r\nContent-Length: 5\r\n\r\nhello";
        let msgs = messages(s);
        assert_eq!(msgs.len(), 1);
        assert_eq!(msgs[0].head.content_type().as_deref(), Some("text/html"));
        assert_eq!(&s[msgs[0].body.clone()], b"hello");
    }

    #[test]
    fn pipelined_requests() {
        let s = b"GET /a HTTP/1.1\r\nHost: x\r\n\r\nPOST /b?k=v HTTP/1.1\r\nContent-Length: 2\r\n\r\n{}";
        let msgs = messages(s);
        assert_eq!(msgs.len(), 2);
        assert_eq!(
            msgs[1].head.start,
            StartLine::Request { method: "POST".into(), target: "/b?k=v".into() }
        );
        assert_eq!(&s[msgs[1].body.clone()], b"{}");
    }

    #[test]
    fn chunked_body() {
        let s = b"HTTP/1.1 200 OK\r\nTransfer-Encoding: chunked\r\n\r\n3\r\nabc\r\n2\r\nde\r\n0\r\n\r\nHTTP/1.1 204 No Content\r\n\r\n";
        let msgs = messages(s);
        assert_eq!(msgs.len(), 2);
        assert_eq!(dechunk(&s[msgs[0].body.clone()]), b"abcde");
    }

    #[test]
    fn non_http() {
        assert!(parse_head(b"\x16\x03\x01\x00").is_none());
        assert!(messages(b"random").is_empty());
    }
}
