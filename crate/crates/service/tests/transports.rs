use std::path::{Path, PathBuf};
use std::sync::Arc;

use futures::{SinkExt, StreamExt};
use http_body_util::BodyExt;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tower::ServiceExt;

use teleop_core::baselines::{FingertipConfig, JointCorrespondence};
use teleop_core::empirical::{build_empirical_mapping, ExtremaPoses, MotionAssignment};
use teleop_core::hand_model::HandModel;
use teleop_core::session::{
    load_trajectory, replay_eval, MappingKind, MessageType, ReplayReport, SessionResources,
    StreamMessage,
};
use teleop_core::subspace::TeleopMapping;
use teleop_service::{handle_stream, router, serve_tcp, MapRequest, MapResponse, SessionInfo};

fn data() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn empirical(hand: &str) -> (HandModel, TeleopMapping) {
    let d = data();
    let model = HandModel::load_validated(&d.join(format!("models/{hand}.json"))).unwrap();
    let assign = MotionAssignment::load(&d.join(format!("assignments/{hand}.json"))).unwrap();
    let extrema = ExtremaPoses::load(&d.join(format!("extrema/{hand}.json"))).unwrap();
    let origin = extrema.origin.clone().unwrap();
    let mapping = build_empirical_mapping(&model, &origin, &assign, &extrema).unwrap();
    (model, mapping)
}

fn resources() -> Arc<SessionResources> {
    let d = data();
    let (master_model, master) = empirical("human_glove7");
    let (slave_model, slave) = empirical("schunk_sdh");
    let res = SessionResources {
        master_mapping: Some(master),
        slave_mapping: Some(slave),
        master_model: Some(master_model),
        slave_model: Some(slave_model),
        correspondence: Some(
            JointCorrespondence::load(&d.join("correspondence/human_to_schunk_sdh.json")).unwrap(),
        ),
        fingertip: Some(
            FingertipConfig::load(&d.join("fingertip/human_to_schunk_sdh.json")).unwrap(),
        ),
        initial_kind: MappingKind::Subspace,
        clamp: true,
    };
    res.validate().unwrap();
    Arc::new(res)
}

async fn start_tcp(res: Arc<SessionResources>) -> std::net::SocketAddr {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(serve_tcp(listener, res));
    addr
}

async fn tcp_exchange(
    addr: std::net::SocketAddr,
    input: String,
    expect: usize,
) -> Vec<StreamMessage> {
    let stream = TcpStream::connect(addr).await.unwrap();
    let (read, mut write) = stream.into_split();
    let writer = tokio::spawn(async move {
        write.write_all(input.as_bytes()).await.unwrap();
        write.shutdown().await.unwrap();
    });
    let mut lines = BufReader::new(read).lines();
    let mut out = Vec::new();
    while out.len() < expect {
        let Some(line) = lines.next_line().await.unwrap() else {
            break;
        };
        out.push(serde_json::from_str(&line).unwrap());
    }
    writer.await.unwrap();
    out
}

fn pose_lines(poses: &[(f64, Vec<f64>)]) -> String {
    poses
        .iter()
        .map(|(t, q)| StreamMessage::master_pose(*t, q.clone()).to_line().unwrap() + "\n")
        .collect()
}

#[tokio::test]
async fn tcp_replies_once_per_pose_in_order() {
    let res = resources();
    let origin = res.master_mapping.as_ref().unwrap().origin.0.clone();
    let poses: Vec<(f64, Vec<f64>)> = (0..1000)
        .map(|i| {
            let mut q = origin.clone();
            q[2] += 0.001 * (i % 100) as f64;
            (i as f64 * 0.02, q)
        })
        .collect();
    let addr = start_tcp(res).await;
    let replies = tcp_exchange(addr, pose_lines(&poses), 1000).await;
    assert_eq!(replies.len(), 1000);
    for (r, (t, _)) in replies.iter().zip(&poses) {
        assert_eq!(r.kind, MessageType::SlavePose);
        assert_eq!(r.t, *t);
        assert_eq!(r.q.as_ref().unwrap().len(), 7);
        assert!(r.psi.is_some());
    }
}

#[tokio::test]
async fn origin_maps_to_slave_origin_over_tcp() {
    let res = resources();
    let origin = res.master_mapping.as_ref().unwrap().origin.0.clone();
    let slave_origin = res.slave_mapping.as_ref().unwrap().origin.0.clone();
    let addr = start_tcp(res).await;
    let replies = tcp_exchange(addr, pose_lines(&[(3.0, origin)]), 1).await;
    assert_eq!(replies[0].q.as_ref().unwrap(), &slave_origin);
    assert_eq!(replies[0].psi, Some([0.0; 3]));
}

#[tokio::test]
async fn malformed_lines_get_errors_and_session_continues() {
    let res = resources();
    let origin = res.master_mapping.as_ref().unwrap().origin.0.clone();
    let addr = start_tcp(res).await;
    let mut input = String::from("this is not json\n");
    input.push_str(&pose_lines(&[(1.0, vec![0.0; 3])]));
    input.push_str(&pose_lines(&[(2.0, origin)]));
    let replies = tcp_exchange(addr, input, 3).await;
    let kinds: Vec<_> = replies.iter().map(|r| r.kind).collect();
    assert_eq!(
        kinds,
        [
            MessageType::Error,
            MessageType::Error,
            MessageType::SlavePose
        ]
    );
    assert_eq!(replies[1].t, 1.0);
    assert!(replies[1].q.is_none());
}

#[tokio::test]
async fn stream_matches_offline_replay_for_every_mapping() {
    let res = resources();
    let traj = load_trajectory(&data().join("trajectories/glove_precision_sweep.jsonl")).unwrap();
    let traj = &traj[..200];
    for kind in [
        MappingKind::Subspace,
        MappingKind::Joint,
        MappingKind::Fingertip,
    ] {
        let mut offline_res = (*res).clone();
        offline_res.initial_kind = kind;
        let (_, offline) = replay_eval(traj, Arc::new(offline_res)).unwrap();

        let mut input = StreamMessage::set_mapping(0.0, kind).to_line().unwrap() + "\n";
        input.push_str(&pose_lines(
            &traj.iter().map(|p| (p.t, p.q.clone())).collect::<Vec<_>>(),
        ));
        let mut out = Vec::new();
        handle_stream(BufReader::new(input.as_bytes()), &mut out, res.clone())
            .await
            .unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        let ack: StreamMessage = serde_json::from_str(lines.next().unwrap()).unwrap();
        assert_eq!(ack.kind, MessageType::Info);
        let expected: Vec<String> = offline.iter().map(|m| m.to_line().unwrap()).collect();
        assert_eq!(
            lines.map(str::to_owned).collect::<Vec<_>>(),
            expected,
            "{kind:?}"
        );
    }
}

#[tokio::test]
async fn concurrent_connections_are_independent() {
    let res = resources();
    let origin = res.master_mapping.as_ref().unwrap().origin.0.clone();
    let addr = start_tcp(res).await;
    let poses: Vec<(f64, Vec<f64>)> = (0..50).map(|i| (i as f64, origin.clone())).collect();
    let a = tcp_exchange(
        addr,
        StreamMessage::set_mapping(0.0, MappingKind::Joint)
            .to_line()
            .unwrap()
            + "\n"
            + &pose_lines(&poses),
        51,
    );
    let b = tcp_exchange(addr, pose_lines(&poses), 50);
    let (a, b) = tokio::join!(a, b);
    assert!(a[1..]
        .iter()
        .all(|m| m.mapping_ref.as_deref() == Some("joint")));
    assert!(b
        .iter()
        .all(|m| m.mapping_ref.as_deref() == Some("subspace")));
    assert_eq!(a.len(), 51);
    assert_eq!(b.len(), 50);
}

async fn body_json<T: serde::de::DeserializeOwned>(resp: axum::response::Response) -> T {
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    serde_json::from_slice(&bytes).unwrap()
}

fn post(uri: &str, body: String) -> axum::http::Request<axum::body::Body> {
    axum::http::Request::post(uri)
        .header("content-type", "application/json")
        .body(axum::body::Body::from(body))
        .unwrap()
}

#[tokio::test]
async fn http_health_and_session_info() {
    let app = router(resources());
    let resp = app
        .clone()
        .oneshot(
            axum::http::Request::get("/v1/health")
                .body(axum::body::Body::empty())
                .unwrap(),
        )
        .await
        .unwrap();
    assert_eq!(resp.status(), 200);
    let resp = app
        .oneshot(
            axum::http::Request::get("/v1/session")
                .body(axum::body::Body::empty())
                .unwrap(),
        )
        .await
        .unwrap();
    let info: SessionInfo = body_json(resp).await;
    assert_eq!(info.master_dof, Some(7));
    assert_eq!(info.supported.len(), 3);
    assert_eq!(info.slave_model.unwrap().hand_id, "schunk_sdh");
}

#[tokio::test]
async fn http_map_uses_inline_mappings() {
    let res = resources();
    let master = res.master_mapping.as_ref().unwrap();
    let slave = res.slave_mapping.as_ref().unwrap();
    let req = MapRequest {
        master: serde_json::from_str(&master.to_json_string().unwrap()).unwrap(),
        slave: serde_json::from_str(&slave.to_json_string().unwrap()).unwrap(),
        slave_model: None,
        poses: vec![teleop_core::session::TrajectoryPoint {
            t: 0.5,
            q: master.origin.0.clone(),
        }],
    };
    let resp = router(res.clone())
        .oneshot(post("/v1/map", serde_json::to_string(&req).unwrap()))
        .await
        .unwrap();
    assert_eq!(resp.status(), 200);
    let out: MapResponse = body_json(resp).await;
    assert_eq!(out.replies.len(), 1);
    assert_eq!(out.replies[0].q.as_ref().unwrap(), &slave.origin.0);

    let mut bad = req.clone();
    bad.master = serde_json::json!({"nope": 1});
    let resp = router(res)
        .oneshot(post("/v1/map", serde_json::to_string(&bad).unwrap()))
        .await
        .unwrap();
    assert_eq!(resp.status(), 400);
}

#[tokio::test]
async fn http_replay_matches_offline_paths() {
    let res = resources();
    let traj = load_trajectory(&data().join("trajectories/glove_open_close.jsonl")).unwrap();
    let (offline, _) = replay_eval(&traj, res.clone()).unwrap();
    let body = serde_json::json!({ "trajectory": traj }).to_string();
    let resp = router(res)
        .oneshot(post("/v1/replay-eval", body))
        .await
        .unwrap();
    assert_eq!(resp.status(), 200);
    let report: ReplayReport = body_json(resp).await;
    assert_eq!(report.steps, traj.len());
    assert_eq!(report.slave_path, offline.slave_path);
    assert_eq!(report.psi_path, offline.psi_path);
    assert_eq!(report.clamp_count, offline.clamp_count);
}

#[tokio::test]
async fn websocket_stream_with_fk_frames() {
    use tokio_tungstenite::tungstenite::Message;
    let res = resources();
    let origin = res.master_mapping.as_ref().unwrap().origin.0.clone();
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(teleop_service::serve_http(listener, res));

    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/v1/stream"))
        .await
        .unwrap();
    let mut set = StreamMessage::set_mapping(0.0, MappingKind::Subspace);
    set.with_fk = Some(true);
    ws.send(Message::text(set.to_line().unwrap()))
        .await
        .unwrap();
    ws.send(Message::text(
        StreamMessage::master_pose(1.0, origin).to_line().unwrap(),
    ))
    .await
    .unwrap();
    let mut got = Vec::new();
    while got.len() < 3 {
        match ws.next().await.unwrap().unwrap() {
            Message::Text(t) => got.push(serde_json::from_str::<StreamMessage>(&t).unwrap()),
            _ => continue,
        }
    }
    assert_eq!(got[0].kind, MessageType::Info);
    assert_eq!(got[1].kind, MessageType::SlavePose);
    assert_eq!(got[2].kind, MessageType::Info);
    let fk = got[2].fk.as_ref().unwrap();
    assert_eq!(fk.master.as_ref().unwrap().len(), 3);
    let slave = fk.slave.as_ref().unwrap();
    assert_eq!(slave.len(), 3);
    // thumb has two links, each other finger a spread link plus two
    assert_eq!(slave.iter().map(|f| f.len() - 1).sum::<usize>(), 8);
}
