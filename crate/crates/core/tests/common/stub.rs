//! Minimal chat-completion server on a local port. Each request is answered
//! with the next scripted reply (the last one repeats) and recorded.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;

pub enum Reply {
    /// Wrapped as `choices[0].message.content`.
    Content(String),
    /// Sent verbatim as the body.
    Raw(String),
    Status(u16),
}

pub struct StubServer {
    pub url: String,
    pub requests: Arc<Mutex<Vec<serde_json::Value>>>,
}

impl StubServer {
    pub fn start(script: Vec<Reply>) -> StubServer {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let seen = requests.clone();
        thread::spawn(move || {
            for (i, stream) in listener.incoming().enumerate() {
                let Ok(stream) = stream else { break };
                let reply = &script[i.min(script.len() - 1)];
                if serve(stream, reply, &seen).is_err() {
                    continue;
                }
            }
        });
        StubServer { url, requests }
    }

    pub fn request_count(&self) -> usize {
        self.requests.lock().unwrap().len()
    }
}

fn serve(stream: TcpStream, reply: &Reply, seen: &Mutex<Vec<serde_json::Value>>) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut len = 0;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body)?;
    seen.lock().unwrap().push(serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null));
    let (status, text) = match reply {
        Reply::Content(c) => (
            200,
            serde_json::json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": c}}]}).to_string(),
        ),
        Reply::Raw(r) => (200, r.clone()),
        Reply::Status(s) => (*s, "{\"error\": \"stub\"}".to_string()),
    };
    let mut out = stream;
    write!(
        out,
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
        text.len()
    )?;
    out.flush()
}
