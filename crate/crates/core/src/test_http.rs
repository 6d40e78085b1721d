//! Minimal scripted HTTP/1.1 server for exercising the HTTP backends in tests.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::thread::JoinHandle;

pub struct Reply {
    status: u16,
    body: String,
}

impl Reply {
    pub fn new(status: u16, body: &str) -> Self {
        Self {
            status,
            body: body.to_string(),
        }
    }
}

#[derive(Debug)]
pub struct Captured {
    pub headers: Vec<String>,
    pub body: String,
}

pub struct Server {
    addr: String,
    handle: JoinHandle<Vec<Captured>>,
}

impl Server {
    pub fn url(&self) -> String {
        format!("http://{}/v1/endpoint", self.addr)
    }

    pub fn finish(self) -> Vec<Captured> {
        self.handle.join().expect("server thread")
    }
}

/// Serves one reply per incoming connection, in order, then shuts down.
pub fn serve(replies: Vec<Reply>) -> Server {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let handle = std::thread::spawn(move || {
        let mut captured = Vec::new();
        for reply in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut headers = Vec::new();
            let mut content_length = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end().to_string();
                if line.is_empty() {
                    break;
                }
                if let Some((name, value)) = line.split_once(':') {
                    if name.eq_ignore_ascii_case("content-length") {
                        content_length = value.trim().parse().unwrap();
                    }
                }
                headers.push(line);
            }
            let mut body = vec![0u8; content_length];
            reader.read_exact(&mut body).unwrap();
            captured.push(Captured {
                headers,
                body: String::from_utf8(body).unwrap(),
            });
            let mut stream = stream;
            let response = format!(
                "HTTP/1.1 {} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                reply.status,
                reply.body.len(),
                reply.body
            );
            stream.write_all(response.as_bytes()).unwrap();
        }
        captured
    });
    Server { addr, handle }
}
