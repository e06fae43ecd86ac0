use fusekit::graph::build_graph;
use fusekit::ldp::{perturb_graph, NoiseSpec, PerturbConfig};
use fusekit::nn::{load_model, save_model};
use fusekit::protocol::{
    deserialize_message, serialize_message, Envelope, ErrorCode, Message, StreamTransport, Transport,
};
use fusekit::{Activation, Matrix, MlpModel, MlpSpec, PrivacyBudget};
use proptest::prelude::*;

fn finite() -> impl Strategy<Value = f64> {
    any::<f64>().prop_filter("finite", |x| x.is_finite())
}

fn matrix() -> impl Strategy<Value = Matrix> {
    (1usize..4, 1usize..4).prop_flat_map(|(r, c)| {
        prop::collection::vec(finite(), r * c).prop_map(move |d| Matrix::from_vec(r, c, d).unwrap())
    })
}

fn message() -> impl Strategy<Value = Message> {
    prop_oneof![
        (any::<u32>(), "[a-z]{0,8}", "[0-9a-f]{64}", prop::option::of((0.001f64..5.0, 0.001f64..5.0, 0.001f64..5.0)))
            .prop_map(|(v, id, digest, b)| Message::Hello {
                protocol_version: v,
                party_id: id,
                arch_digest: digest,
                budget: b.map(|(a, w, f)| PrivacyBudget::new(a, w, f)),
            }),
        (prop::collection::vec(matrix(), 1..3), any::<bool>(), any::<bool>()).prop_map(|(weights, p, s)| {
            Message::AlignedWeights {
                weights,
                biases: None,
                pfa_applied: p,
                sfu_applied: s,
                sfu_rescaled: s,
            }
        }),
        ("[ -~]{0,20}").prop_map(|detail| Message::Error {
            code: ErrorCode::Sequence,
            detail,
        }),
        Just(Message::Bye),
    ]
}

proptest! {
    #[test]
    fn frames_round_trip(msg in message(), seq in any::<u64>(), sid in "[a-z0-9-]{1,12}") {
        let env = Envelope::new(sid, seq, msg);
        let frame = serialize_message(&env).unwrap();
        let back = deserialize_message(&frame).unwrap();
        prop_assert_eq!(&back, &env);
        prop_assert_eq!(serialize_message(&back).unwrap(), frame);
    }

    #[test]
    fn model_documents_round_trip(seed in any::<u64>(), scale in finite()) {
        let spec = MlpSpec::new(vec![3, 4, 2], Activation::Tanh, true).unwrap();
        let m = MlpModel::init_uniform(spec, seed).unwrap().scaled(scale);
        let back = MlpModel::from_document(&m.to_document()).unwrap();
        prop_assert_eq!(&back, &m);
        for (x, y) in back.weights.iter().zip(&m.weights) {
            for (a, b) in x.as_slice().iter().zip(y.as_slice()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}

#[test]
fn desk_graph_share_frame_keeps_shapes() {
    let spec = MlpSpec::new(vec![784, 32, 32, 10], Activation::Relu, false).unwrap();
    let model = MlpModel::init_uniform(spec, 1).unwrap();
    let probe = Matrix::from_fn(200, 784, |i, j| ((i * 13 + j * 7) % 29) as f64 / 29.0);
    let share = perturb_graph(
        &build_graph(&model, &probe).unwrap(),
        &PerturbConfig::private(PrivacyBudget::new(1.0, 1.0, 1.0)),
        &NoiseSpec::new(2),
    )
    .unwrap();
    let frame = serialize_message(&Envelope::new("s", 1, Message::GraphShare { graph: share })).unwrap();
    match deserialize_message(&frame).unwrap().message {
        Message::GraphShare { graph } => {
            let shapes: Vec<_> = graph.node_features.iter().map(Matrix::shape).collect();
            assert_eq!(shapes, vec![(32, 200), (32, 200)]);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn model_file_round_trip() {
    let spec = MlpSpec::new(vec![5, 4, 3], Activation::Relu, true).unwrap();
    let m = MlpModel::init_uniform(spec, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    save_model(&m, &path).unwrap();
    assert_eq!(load_model(&path).unwrap(), m);
    assert_eq!(load_model(&path).unwrap().digest(), m.digest());
}

#[test]
fn stream_transport_over_tcp() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = std::thread::spawn(move || {
        let (sock, _) = listener.accept().unwrap();
        let mut t = StreamTransport::new(sock);
        let frame = t.recv_frame().unwrap();
        t.send_frame(&frame).unwrap();
    });
    let mut client = StreamTransport::new(std::net::TcpStream::connect(addr).unwrap());
    let frame = serialize_message(&Envelope::new("t", 0, Message::Bye)).unwrap();
    client.send_frame(&frame).unwrap();
    assert_eq!(client.recv_frame().unwrap(), frame);
    server.join().unwrap();
}
