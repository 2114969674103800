//! Submission wire-contract tests against a minimal local HTTP stub.

use std::io::{Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::time::Duration;

use comfyflow::executor::{submit, submit_batch, ServerClient, SubmitOutcome};
use comfyflow::ir::GraphBuilder;

fn find_headers_end(data: &[u8]) -> Option<usize> {
    data.windows(4).position(|w| w == b"\r\n\r\n")
}

/// Serves a fixed response to a handful of requests, reporting each
/// request body through the channel.
fn spawn_stub(
    status_line: &'static str,
    body: &'static str,
    requests: mpsc::Sender<String>,
) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        for stream in listener.incoming().take(8) {
            let Ok(mut stream) = stream else { continue };
            stream
                .set_read_timeout(Some(Duration::from_secs(2)))
                .unwrap();
            let mut data = Vec::new();
            let mut buf = [0u8; 16384];
            loop {
                match stream.read(&mut buf) {
                    Ok(0) => break,
                    Ok(n) => {
                        data.extend_from_slice(&buf[..n]);
                        if let Some(pos) = find_headers_end(&data) {
                            let headers = String::from_utf8_lossy(&data[..pos]);
                            let content_length = headers
                                .lines()
                                .find_map(|line| {
                                    line.to_ascii_lowercase()
                                        .strip_prefix("content-length:")
                                        .and_then(|v| v.trim().parse::<usize>().ok())
                                })
                                .unwrap_or(0);
                            if data.len() >= pos + 4 + content_length {
                                let request_body =
                                    String::from_utf8_lossy(&data[pos + 4..]).to_string();
                                let _ = requests.send(request_body);
                                break;
                            }
                        }
                    }
                    Err(_) => break,
                }
            }
            let response = format!(
                "HTTP/1.1 {status_line}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            let _ = stream.write_all(response.as_bytes());
        }
    });
    format!("http://{addr}")
}

fn minimal_workflow() -> comfyflow::ir::GraphWorkflow {
    let mut b = GraphBuilder::new();
    let n = b.node("EmptyLatentImage");
    b.input(n, "width", "INT")
        .input(n, "height", "INT")
        .widget(n, serde_json::json!(512))
        .widget(n, serde_json::json!(512));
    b.finish().unwrap()
}

#[test]
fn submit_accepted_carries_prompt_id_and_wire_shape() {
    let (tx, rx) = mpsc::channel();
    let url = spawn_stub("200 OK", r#"{"prompt_id":"abc"}"#, tx);
    let server = ServerClient::new(url, Duration::from_secs(2)).unwrap();
    let outcome = submit(&minimal_workflow(), &server).unwrap();
    assert_eq!(
        outcome,
        SubmitOutcome::Accepted {
            prompt_id: "abc".into()
        }
    );

    // The posted body is {prompt, client_id} with api-format entries.
    let body: serde_json::Value =
        serde_json::from_str(&rx.recv_timeout(Duration::from_secs(2)).unwrap()).unwrap();
    assert!(body["client_id"].as_str().unwrap().len() >= 32);
    assert_eq!(body["prompt"]["1"]["class_type"], "EmptyLatentImage");
    assert_eq!(body["prompt"]["1"]["inputs"]["width"], 512);
}

#[test]
fn submit_passes_server_rejection_through_verbatim() {
    let (tx, _rx) = mpsc::channel();
    let url = spawn_stub(
        "400 Bad Request",
        r#"{"error":{"type":"invalid_prompt","message":"missing node"}}"#,
        tx,
    );
    let server = ServerClient::new(url, Duration::from_secs(2)).unwrap();
    let outcome = submit(&minimal_workflow(), &server).unwrap();
    match outcome {
        SubmitOutcome::Rejected { server_message } => {
            assert_eq!(
                server_message,
                r#"{"error":{"type":"invalid_prompt","message":"missing node"}}"#
            );
        }
        other => panic!("unexpected outcome {other:?}"),
    }
}

#[test]
fn submit_unreachable_server_is_a_transport_error() {
    // Bind-then-drop to get a port that refuses connections.
    let port = {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        listener.local_addr().unwrap().port()
    };
    let server = ServerClient::new(
        format!("http://127.0.0.1:{port}"),
        Duration::from_millis(300),
    )
    .unwrap();
    let result = submit(&minimal_workflow(), &server);
    assert!(matches!(
        result,
        Err(comfyflow::executor::ExecError::Transport(_))
    ));
}

#[test]
fn batch_submit_returns_results_in_input_order() {
    let (tx, _rx) = mpsc::channel();
    let url = spawn_stub("200 OK", r#"{"prompt_id":"abc"}"#, tx);
    let server = ServerClient::new(url, Duration::from_secs(2)).unwrap();
    let workflows = vec![minimal_workflow(), minimal_workflow(), minimal_workflow()];
    let results = submit_batch(&workflows, &server, 4);
    assert_eq!(results.len(), 3);
    for result in results {
        assert!(matches!(result, Ok(SubmitOutcome::Accepted { .. })));
    }
}

#[test]
fn llm_client_posts_the_documented_fields() {
    let (tx, rx) = mpsc::channel();
    let url = spawn_stub("200 OK", r#"{"text":"hello"}"#, tx);
    let client = comfyflow::llm::HttpLlmClient::new(comfyflow::llm::LlmOptions::new(
        url,
        "test-model",
    ))
    .unwrap();
    let reply = comfyflow::llm::LlmClient::complete(&client, "say hello").unwrap();
    assert_eq!(reply, "hello");

    let body: serde_json::Value =
        serde_json::from_str(&rx.recv_timeout(Duration::from_secs(2)).unwrap()).unwrap();
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["prompt"], "say hello");
    assert_eq!(body["temperature"], 0.95);
    assert_eq!(body["top_p"], 0.7);
    assert_eq!(body["max_tokens"], 8192);
}

#[test]
fn remote_embedding_provider_retries_once_on_transient_failure() {
    use comfyflow::nodebase::EmbeddingProvider;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let calls = Arc::new(AtomicUsize::new(0));
    let seen = calls.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming().take(4) {
            let Ok(mut stream) = stream else { continue };
            let n = seen.fetch_add(1, Ordering::SeqCst);
            if n == 0 {
                // Drop the first connection without replying.
                continue;
            }
            let mut buf = [0u8; 16384];
            let _ = stream.read(&mut buf);
            let body = r#"{"vector":[1.0,0.0,0.0,0.0]}"#;
            let response = format!(
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            let _ = stream.write_all(response.as_bytes());
        }
    });

    let provider = comfyflow::nodebase::RemoteEmbeddingProvider::new(
        format!("http://{addr}"),
        Some("encoder".into()),
        4,
        Duration::from_secs(2),
    )
    .unwrap();
    let embedding = provider.embed("KSampler").unwrap();
    assert_eq!(embedding.dimension(), 4);
    assert!((embedding.norm() - 1.0).abs() < 1e-9);
    assert!(calls.load(Ordering::SeqCst) >= 2, "first call should have failed");
}

#[test]
fn api_format_references_resolve_after_reparsing() {
    // Lift the large fixture and re-parse its api form: every reference
    // must name an existing node and an in-range output slot.
    let diagram =
        comfyflow::ir::parse_diagram(include_bytes!("fixtures/flux_outpaint_diagram.json")).unwrap();
    let mut inputs: std::collections::BTreeMap<&str, Vec<&str>> = Default::default();
    let mut outputs: std::collections::BTreeMap<&str, Vec<&str>> = Default::default();
    for link in diagram.links() {
        let outs = outputs.entry(link.out_node.type_name.as_str()).or_default();
        if !outs.contains(&link.out_port.as_str()) {
            outs.push(link.out_port.as_str());
        }
        inputs.entry(link.out_node.type_name.as_str()).or_default();
        let ins = inputs.entry(link.in_node.type_name.as_str()).or_default();
        if !ins.contains(&link.in_port.as_str()) {
            ins.push(link.in_port.as_str());
        }
        outputs.entry(link.in_node.type_name.as_str()).or_default();
    }
    let specs: Vec<comfyflow::nodebase::NodeSpec> = inputs
        .keys()
        .map(|name| {
            let mut spec = comfyflow::nodebase::NodeSpec::new(*name);
            spec.input_names = inputs[name]
                .iter()
                .map(|p| comfyflow::ir::PortName::new(*p).unwrap())
                .collect();
            spec.output_names = outputs[name]
                .iter()
                .map(|p| comfyflow::ir::PortName::new(*p).unwrap())
                .collect();
            spec
        })
        .collect();
    let base = comfyflow::nodebase::NodeBase::build(
        specs,
        &comfyflow::nodebase::TrigramProvider::default(),
    )
    .unwrap();
    let graph = comfyflow::executor::lift(&diagram, &base).unwrap();
    let api: serde_json::Value =
        serde_json::from_slice(&comfyflow::executor::to_api_format(&graph).unwrap()).unwrap();
    let entries = api.as_object().unwrap();
    assert_eq!(entries.len(), graph.nodes.len());
    for entry in entries.values() {
        for input in entry["inputs"].as_object().unwrap().values() {
            if let Some(reference) = input.as_array() {
                let node_id: u64 = reference[0].as_str().unwrap().parse().unwrap();
                let slot = reference[1].as_u64().unwrap() as usize;
                let node = graph.node(node_id).expect("reference resolves");
                assert!(slot < node.outputs.len());
            }
        }
    }
}
