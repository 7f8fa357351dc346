//! Chat and embedding clients against a local one-shot HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::thread;

use serde_json::{json, Value};

use mcforge::assistant::{Embedder, HttpEmbedder};
use mcforge::chat::{ChatEndpoint, ChatMessage, ChatRequest, HttpChatEndpoint, ToolSchema};

struct Captured {
    request_line: String,
    authorization: Option<String>,
    body: Value,
}

/// Serve one request with `reply` and hand back what was received.
fn serve_once(reply: Value) -> (String, thread::JoinHandle<Captured>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/endpoint", listener.local_addr().unwrap());
    let handle = thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut request_line = String::new();
        reader.read_line(&mut request_line).unwrap();
        let (mut length, mut authorization) = (0usize, None);
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let line = line.trim_end();
            if line.is_empty() {
                break;
            }
            let (name, value) = line.split_once(':').unwrap();
            match name.to_ascii_lowercase().as_str() {
                "content-length" => length = value.trim().parse().unwrap(),
                "authorization" => authorization = Some(value.trim().to_string()),
                _ => {}
            }
        }
        let mut body = vec![0u8; length];
        reader.read_exact(&mut body).unwrap();
        let payload = reply.to_string();
        let mut stream = stream;
        write!(
            stream,
            "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
            payload.len()
        )
        .unwrap();
        Captured {
            request_line: request_line.trim_end().to_string(),
            authorization,
            body: serde_json::from_slice(&body).unwrap(),
        }
    });
    (url, handle)
}

#[test]
fn clients_speak_the_openai_wire_format() {
    std::env::set_var("MCFORGE_API_KEY", "chat-secret");
    std::env::set_var("MCFORGE_EMBED_KEY", "embed-secret");

    let reply = json!({
        "choices": [{
            "index": 0,
            "message": {
                "role": "assistant",
                "content": null,
                "tool_calls": [{
                    "id": "call_9",
                    "type": "function",
                    "function": { "name": "plot_data", "arguments": "{\"semilogx\":true}" }
                }]
            }
        }]
    });
    let (url, server) = serve_once(reply);
    let mut chat = HttpChatEndpoint::from_env(url);
    let request = ChatRequest {
        model: "test-model".into(),
        messages: vec![ChatMessage::system("sys"), ChatMessage::user("hello")],
        tools: vec![ToolSchema::new("plot_data", "Plot", json!({ "type": "object", "properties": {} }))],
    };
    let msg = chat.complete(&request).unwrap();
    let seen = server.join().unwrap();
    assert!(seen.request_line.starts_with("POST /v1/endpoint"));
    assert_eq!(seen.authorization.as_deref(), Some("Bearer chat-secret"));
    assert_eq!(seen.body["model"], "test-model");
    assert_eq!(seen.body["messages"][1], json!({ "role": "user", "content": "hello" }));
    assert_eq!(seen.body["tools"][0]["type"], "function");
    assert_eq!(seen.body["tools"][0]["function"]["name"], "plot_data");
    assert_eq!(msg.tool_calls.len(), 1);
    assert_eq!(msg.tool_calls[0].function.name, "plot_data");

    let reply = json!({
        "data": [
            { "index": 0, "embedding": [3.0, 4.0, 0.0] },
            { "index": 1, "embedding": [0.0, 0.0, 2.0] }
        ]
    });
    let (url, server) = serve_once(reply);
    let mut embedder = HttpEmbedder::from_env(url, "embed-model", 3);
    let vectors = embedder.embed(&["a".into(), "b".into()]).unwrap();
    let seen = server.join().unwrap();
    assert_eq!(seen.authorization.as_deref(), Some("Bearer embed-secret"));
    assert_eq!(seen.body, json!({ "model": "embed-model", "input": ["a", "b"] }));
    assert_eq!(vectors.len(), 2);
    assert!((vectors[0][0] - 0.6).abs() < 1e-6 && (vectors[0][1] - 0.8).abs() < 1e-6);

    // Wrong dimension from the provider.
    let (url, server) = serve_once(json!({ "data": [{ "index": 0, "embedding": [1.0] }] }));
    let mut embedder = HttpEmbedder::from_env(url, "embed-model", 3);
    assert!(embedder.embed(&["a".into()]).is_err());
    server.join().unwrap();

    // Nothing listening.
    let dead = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let mut chat = HttpChatEndpoint::from_env(format!("http://{dead}/"));
    assert!(chat.complete(&request).is_err());
}
