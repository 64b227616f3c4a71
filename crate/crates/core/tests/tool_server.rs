use std::io::{BufRead, BufReader, Cursor, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;
use std::thread;

use geoanchor::protocol::server::{ClientError, ToolClient, ToolRequest, ToolServer};
use geoanchor::protocol::{ToolCall, ToolInvocation, ToolOutcome, ToolResponse, ToolResult};
use geoanchor::scene::save_scene;
use geoanchor::synthetic::synthetic_corpus;
use geoanchor::tools::{DepthQuery, SamplingConfig, SpatialTools};
use geoanchor::Box2D;
use serde_json::Value;

fn spawn(server: ToolServer) -> std::net::SocketAddr {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = Arc::new(server);
    thread::spawn(move || server.serve_tcp(listener));
    addr
}

fn gt_query(scene: &geoanchor::scene::Scene, id: u32) -> DepthQuery {
    let cat = scene.record.instance(id).unwrap().category.clone();
    DepthQuery { category: cat, bbox_2d: scene.gt_box2d(id).unwrap() }
}

#[test]
fn pipelined_requests_keep_order_and_ids() {
    let scenes = synthetic_corpus(9, 4);
    let addr = spawn(ToolServer::from_scenes(scenes.clone(), SpatialTools::ground_truth(), SamplingConfig::default()));
    let mut client = ToolClient::connect(addr).unwrap();
    let mut expected = Vec::new();
    for i in 0..100 {
        let scene = &scenes[i % scenes.len()];
        let q = gt_query(scene, 1);
        let call = ToolCall {
            call_id: format!("req-{i}"),
            invocation: ToolInvocation::DepthSampling { queries: vec![q.clone()] },
        };
        client.send(&ToolRequest { scene_id: scene.id().into(), call }).unwrap();
        let direct = SpatialTools::ground_truth().depth_sampling(scene, &[q], &SamplingConfig::default()).unwrap();
        expected.push((format!("req-{i}"), direct));
    }
    for (id, direct) in expected {
        let resp = client.recv().unwrap();
        assert_eq!(resp.call_id, id);
        assert_eq!(resp.outcome, ToolOutcome::Result(ToolResult::DepthSamples { samples: direct }));
    }
}

#[test]
fn client_helpers_and_errors() {
    let scenes = synthetic_corpus(9, 2);
    let addr = spawn(ToolServer::from_scenes(scenes.clone(), SpatialTools::ground_truth(), SamplingConfig::default()));
    let mut client = ToolClient::connect(addr).unwrap();
    assert_eq!(client.camera_intrinsics(scenes[1].id()).unwrap(), scenes[1].intrinsics());
    let samples = client.depth_sampling(scenes[0].id(), &[gt_query(&scenes[0], 1)]).unwrap();
    assert_eq!(samples.len(), 1);
    assert!(!samples[0].is_empty() && samples[0].iter().all(|s| s.z >= 0.1));

    match client.camera_intrinsics("nope") {
        Err(ClientError::Tool { kind, .. }) => assert_eq!(kind, "unknown_scene"),
        other => panic!("expected unknown_scene, got {other:?}"),
    }
    let outside = DepthQuery { category: "chair".into(), bbox_2d: Box2D::new(0.0, 0.0, 5000.0, 10.0).unwrap() };
    match client.depth_sampling(scenes[0].id(), &[outside]) {
        Err(ClientError::Tool { kind, .. }) => assert_eq!(kind, "invalid_query"),
        other => panic!("expected invalid_query, got {other:?}"),
    }
    // The connection survives failed calls.
    assert_eq!(client.camera_intrinsics(scenes[0].id()).unwrap(), scenes[0].intrinsics());
}

#[test]
fn malformed_lines_get_bad_request() {
    let scenes = synthetic_corpus(9, 1);
    let addr = spawn(ToolServer::from_scenes(scenes.clone(), SpatialTools::ground_truth(), SamplingConfig::default()));
    let stream = TcpStream::connect(addr).unwrap();
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut w = stream;
    let good = format!(
        r#"{{"scene_id":"{}","call":{{"call_id":"k","tool_name":"camera_intrinsics","arguments":{{}}}}}}"#,
        scenes[0].id()
    );
    let lines = [
        "not json".to_string(),
        r#"{"scene_id":"x","call":{"call_id":"q7","tool_name":"teleport","arguments":{}}}"#.to_string(),
        good,
    ];
    for l in &lines {
        writeln!(w, "{l}").unwrap();
    }
    let mut read = || {
        let mut s = String::new();
        reader.read_line(&mut s).unwrap();
        serde_json::from_str::<Value>(&s).unwrap()
    };
    let a = read();
    assert_eq!(a["call_id"], Value::Null);
    assert_eq!(a["error"]["kind"], "bad_request");
    let b = read();
    assert_eq!(b["call_id"], "q7");
    assert_eq!(b["error"]["kind"], "bad_request");
    let c = read();
    assert_eq!(c["call_id"], "k");
    assert_eq!(c["result"]["fx"], serde_json::json!(scenes[0].intrinsics().fx));
}

#[test]
fn lazy_loading_from_disk_over_stdio_style_streams() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = synthetic_corpus(4, 2);
    for s in &scenes {
        save_scene(s, &dir.path().join(s.id())).unwrap();
    }
    let server = ToolServer::open(dir.path(), SpatialTools::ground_truth(), SamplingConfig::default()).unwrap();
    let mut input = String::new();
    for (i, s) in scenes.iter().enumerate() {
        let req = ToolRequest {
            scene_id: s.id().into(),
            call: ToolCall { call_id: i.to_string(), invocation: ToolInvocation::CameraIntrinsics },
        };
        input.push_str(&serde_json::to_string(&req).unwrap());
        input.push_str("\n\n");
    }
    let mut out = Vec::new();
    server.serve_connection(Cursor::new(input), &mut out).unwrap();
    let resps: Vec<ToolResponse> =
        String::from_utf8(out).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(resps.len(), 2);
    for (r, s) in resps.iter().zip(&scenes) {
        assert_eq!(r.outcome, ToolOutcome::Result(ToolResult::Intrinsics(s.intrinsics())));
    }
}
