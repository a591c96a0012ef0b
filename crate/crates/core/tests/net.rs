use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use winocaffe::device::{BufferRole, Device, DeviceConfig, Event, ReprogramPolicy};
use winocaffe::net::{
    parse_netdef, random_weights, save_weights, Brew, LayerKind, NetError, Network,
};
use winocaffe::reference::{direct_conv, pool, relu, ConvSpec, PoolMode, PoolSpec};
use winocaffe::tensor::{Shape, Tensor4D};
use winocaffe::verify::compare_tensors;

fn random_input(shape: Shape, seed: u64) -> Tensor4D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor4D::from_vec(shape, (0..shape.len()).map(|_| rng.gen_range(-1.0f32..=1.0)).collect()).unwrap()
}

fn device() -> Device {
    Device::new(DeviceConfig::default())
}

fn run(text: &str, seed: u64) -> (Network, Device, winocaffe::net::ForwardReport) {
    let def = parse_netdef(text).unwrap();
    let mut dev = device();
    let x = random_input(def.input_shape, seed);
    let mut net = Network::with_random_weights(def, seed, &dev).unwrap();
    let r = net.forward(&x, &mut dev).unwrap();
    (net, dev, r)
}

const HOST_NET: &str = "\
net mixed
input 3 2 10 10
layer conv1 Convolution3x3Winograd out=4
layer relu1 ReLU
layer pool1 Pool window=2 stride=2
layer conv2 Convolution3x3Winograd out=3 strategy=case1
layer relu2 ReLU
";

/// The same network with every compute layer on the device.
fn device_version(text: &str) -> String {
    let mut out = String::new();
    for line in text.lines() {
        out.push_str(line);
        if line.starts_with("input") {
            out.push_str("\nlayer prog XCLProgram binary=all kernel=conv3x3_winograd,relu,pool");
        }
        if line.starts_with("layer") {
            out.push_str(" brew=device");
        }
        out.push('\n');
    }
    out
}

#[test]
fn host_net_equals_composed_reference_ops() {
    let def = parse_netdef(HOST_NET).unwrap();
    let dev = device();
    let weights = random_weights(&def, 3);
    let x = random_input(def.input_shape, 3);
    let mut net = Network::new(def, weights.clone(), &dev).unwrap();
    let mut dev = dev;
    let got = net.forward(&x, &mut dev).unwrap().output;

    let w1 = &weights["conv1"];
    let w2 = &weights["conv2"];
    let y = direct_conv(&x, &w1.weights, w1.bias.as_deref(), &ConvSpec::same3x3(4)).unwrap();
    let y = pool(&relu(&y), &PoolSpec { window: 2, stride: 2, mode: PoolMode::Max }).unwrap();
    let y = relu(&direct_conv(&y, &w2.weights, w2.bias.as_deref(), &ConvSpec::same3x3(3)).unwrap());
    assert_eq!(got, y);
}

#[test]
fn flipping_brew_keeps_output() {
    let (_, _, host) = run(HOST_NET, 9);
    let (_, _, dev) = run(&device_version(HOST_NET), 9);
    assert_eq!(host.output.shape(), dev.output.shape());
    let s = compare_tensors(&dev.output, &host.output);
    assert!(s.passed(), "{s:?}");
    assert!(dev.layers.iter().all(|l| l.ran_on == Brew::Device));
    assert!(host.layers.iter().all(|l| l.ran_on == Brew::Host));
}

#[test]
fn host_device_device_host_transfers() {
    let text = "\
net hddh
input 2 3 8 8
layer prog XCLProgram binary=b kernel=conv3x3_winograd,relu
layer relu0 ReLU
layer conv1 Convolution3x3Winograd out=4 brew=device
layer relu1 ReLU brew=device
layer pool1 Pool window=2
";
    let (_, dev, r) = run(text, 1);
    assert_eq!(r.events.activation_host_to_device, 1);
    assert_eq!(r.events.activation_device_to_host, 1);
    // conv1 weights and bias.
    assert_eq!(r.events.host_to_device, 3);
    assert_eq!(r.events.programs, 1);

    // The only activation upload happens before conv1, the only download before pool1.
    let kinds: Vec<String> = r
        .trace
        .iter()
        .filter(|e| e.event.is_activation_transfer())
        .map(|e| e.to_line())
        .collect();
    assert!(kinds[0].contains("host_to_device,relu0"), "{kinds:?}");
    assert!(kinds[1].contains("device_to_host,relu1"), "{kinds:?}");
    drop(dev);
}

#[test]
fn weights_upload_once_across_passes() {
    let text = device_version(HOST_NET);
    let def = parse_netdef(&text).unwrap();
    let mut dev = device();
    let x = random_input(def.input_shape, 2);
    let mut net = Network::with_random_weights(def, 2, &dev).unwrap();
    let first = net.forward(&x, &mut dev).unwrap();
    let second = net.forward(&x, &mut dev).unwrap();
    assert_eq!(first.events.host_to_device, 1 + 4);
    assert_eq!(second.events.host_to_device, 1);
    assert_eq!(first.output, second.output);
}

#[test]
fn program_events_match_program_layers() {
    let text = "\
net progs
input 1 2 6 6
layer p1 XCLProgram binary=a kernel=relu
layer r1 ReLU brew=device
layer p2 XCLProgram binary=b kernel=pool
layer q Pool window=2 brew=device
layer p3 XCLProgram binary=a kernel=relu
layer r2 ReLU brew=device
";
    let def = parse_netdef(text).unwrap();
    let x = random_input(def.input_shape, 4);
    let mut dev = device();
    let mut net = Network::with_random_weights(def.clone(), 4, &dev).unwrap();
    for _ in 0..2 {
        let r = net.forward(&x, &mut dev).unwrap();
        assert_eq!(r.events.programs, 3);
        let itemized: f64 = r.layers.iter().filter_map(|l| l.program_ms).sum();
        assert_eq!(itemized, r.program_ms);
        assert!(r.program_ms >= 300.0);
    }

    let mut skip = Device::new(DeviceConfig {
        reprogram: ReprogramPolicy::SkipIfLoaded,
        ..DeviceConfig::default()
    });
    let mut net = Network::with_random_weights(def, 4, &skip).unwrap();
    assert_eq!(net.forward(&x, &mut skip).unwrap().events.programs, 3);
    // The second pass starts with `a` loaded, so p1 is skipped.
    assert_eq!(net.forward(&x, &mut skip).unwrap().events.programs, 2);
}

#[test]
fn missing_device_implementation_falls_back_and_is_flagged() {
    let text = "\
net fb
input 2 2 6 6
layer prog XCLProgram binary=b kernel=conv_direct,fully_connected
layer d ConvolutionDirect out=3 brew=device
layer f FullyConnected out=5 brew=device
";
    let (_, _, r) = run(text, 5);
    assert_eq!(r.fallbacks(), ["d", "f"]);
    assert!(r.layers[1..].iter().all(|l| l.ran_on == Brew::Host));
    assert_eq!(r.output.shape(), Shape::new(2, 5, 1, 1));
    assert_eq!(r.events.host_to_device, 0);
    assert!(r.to_text().contains("host fallback"));
}

#[test]
fn pipeline_block_streams_without_host_transfers() {
    let text = "\
net pipe
input 3 3 12 10
layer prog XCLProgram binary=wino kernel=conv3x3_winograd,relu,pool
pipeline block binary=wino
  layer conv Convolution3x3Winograd out=5
  layer relu ReLU
  layer pool Pool window=2 stride=2
end
";
    let (net, _, r) = run(text, 6);
    assert_eq!(r.events.programs, 1);
    assert_eq!(r.events.activation_host_to_device, 1);
    assert_eq!(r.events.activation_device_to_host, 1);
    let block_launches = r
        .trace
        .iter()
        .filter(|e| matches!(e.event, Event::KernelLaunch { .. }))
        .count();
    assert_eq!(block_launches, 3 * 2);

    let seq = device_version("net seq\ninput 3 3 12 10\nlayer conv Convolution3x3Winograd out=5\nlayer relu ReLU\nlayer pool Pool window=2 stride=2\n");
    let def = parse_netdef(&seq).unwrap();
    let mut dev = device();
    let mut w = std::collections::HashMap::new();
    w.insert("conv".to_string(), net.weights("conv").unwrap());
    let mut seq_net = Network::new(def, w, &dev).unwrap();
    let x = random_input(Shape::new(3, 3, 12, 10), 6);
    let s = seq_net.forward(&x, &mut dev).unwrap();
    assert_eq!(s.events.activation_device_to_host, 1);
    assert!(compare_tensors(&r.output, &s.output).passed());
}

#[test]
fn single_child_pipeline_equals_layer() {
    let text = "net one\ninput 2 2 7 7\nlayer prog XCLProgram binary=b kernel=conv3x3_winograd\npipeline p binary=b\nlayer c Convolution3x3Winograd out=3\nend\n";
    let (net, _, r) = run(text, 8);
    let x = random_input(Shape::new(2, 2, 7, 7), 8);
    let lw = net.weights("c").unwrap();
    let want = direct_conv(&x, &lw.weights, lw.bias.as_deref(), &ConvSpec::same3x3(3)).unwrap();
    assert!(compare_tensors(&r.output, &want).passed());
}

#[test]
fn layer_times_add_up() {
    let (_, _, r) = run(&device_version(HOST_NET), 10);
    let sum: f64 = r.layers.iter().map(|l| l.wall_ms).sum();
    assert!(sum <= r.total_ms + 1e-6);
    assert!(r.total_ms - sum < 50.0, "{} vs {}", r.total_ms, sum);
    assert!(r.compute_ms() <= sum);
    assert!(r.modeled_ms() > 0.0);
    assert_eq!(r.layers[0].kind, LayerKind::XCLProgram);
}

#[test]
fn weights_round_trip_through_sidecar_files() {
    let dir = tempfile::tempdir().unwrap();
    let text = "net side\ninput 1 2 5 5\nlayer c Convolution3x3Winograd out=2\nlayer f FullyConnected out=3\n";
    let model = dir.path().join("side.net");
    std::fs::write(&model, text).unwrap();
    let def = parse_netdef(text).unwrap();
    let w = random_weights(&def, 12);
    let files = save_weights(&def, &w, dir.path()).unwrap();
    assert_eq!(files.len(), 4);
    assert!(dir.path().join("side.c.fcw").exists());

    let mut dev = device();
    let mut from_files = Network::from_file(&model, &dev).unwrap();
    assert_eq!(from_files.weights("f").unwrap(), w["f"]);
    let x = random_input(def.input_shape, 1);
    let a = from_files.forward(&x, &mut dev).unwrap().output;
    let b = Network::new(def, w, &dev).unwrap().forward(&x, &mut dev).unwrap().output;
    assert_eq!(a, b);

    std::fs::remove_file(dir.path().join("side.f.fcw")).unwrap();
    assert!(matches!(Network::from_file(&model, &dev), Err(NetError::MissingWeights(_))));
}

#[test]
fn bad_weights_and_inputs_are_rejected() {
    let def = parse_netdef("net b\ninput 1 2 5 5\nlayer c Convolution3x3Winograd out=2\n").unwrap();
    let dev = device();
    let mut w = random_weights(&def, 1);
    w.get_mut("c").unwrap().weights = Tensor4D::zeros(Shape::new(2, 3, 3, 3)).unwrap();
    assert!(matches!(Network::new(def.clone(), w, &dev), Err(NetError::WeightShape { .. })));
    let mut w = random_weights(&def, 1);
    w.get_mut("c").unwrap().bias = Some(vec![0.0; 5]);
    assert!(matches!(Network::new(def.clone(), w, &dev), Err(NetError::BiasLength { .. })));

    let mut dev = dev;
    let mut net = Network::with_random_weights(def, 1, &dev).unwrap();
    let x = Tensor4D::zeros(Shape::new(1, 2, 5, 6)).unwrap();
    assert!(matches!(net.forward(&x, &mut dev), Err(NetError::InputShape { .. })));
}

#[test]
fn parameter_buffers_are_tagged() {
    let (_, dev, _) = run(&device_version(HOST_NET), 2);
    let params = dev
        .log()
        .events()
        .into_iter()
        .filter(|e| matches!(e, Event::HostToDevice { role: BufferRole::Parameter, .. }))
        .count();
    assert_eq!(params, 4);
}

#[derive(Clone, Debug)]
enum Child {
    Conv(usize),
    Relu,
    Pool(usize, usize),
}

fn child() -> impl Strategy<Value = Child> {
    prop_oneof![
        (1usize..4).prop_map(Child::Conv),
        Just(Child::Relu),
        (1usize..3, 1usize..3).prop_map(|(w, s)| Child::Pool(w, s)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pipeline_equals_fold_of_children(
        children in proptest::collection::vec(child(), 1..5),
        n in 1usize..3,
        c in 1usize..3,
        hw in 6usize..12,
        seed in 0u64..1000,
    ) {
        let mut body = String::new();
        for (i, ch) in children.iter().enumerate() {
            body.push_str(&match ch {
                Child::Conv(k) => format!("layer l{i} Convolution3x3Winograd out={k}\n"),
                Child::Relu => format!("layer l{i} ReLU\n"),
                Child::Pool(w, s) => format!("layer l{i} Pool window={w} stride={s} mode=avg\n"),
            });
        }
        let head = format!("net p\ninput {n} {c} {hw} {hw}\nlayer prog XCLProgram binary=b kernel=conv3x3_winograd,relu,pool\n");
        let piped = format!("{head}pipeline blk binary=b\n{body}end\n");
        let sequential = format!("{head}{}", body.lines().map(|l| format!("{l} brew=device\n")).collect::<String>());
        // Pools can shrink the plane below the next window; such nets are rejected at parse.
        let Ok(def) = parse_netdef(&piped) else { return Ok(()); };
        let seq_def = parse_netdef(&sequential).unwrap();
        let x = random_input(def.input_shape, seed);
        let mut dev = device();
        let w = random_weights(&def, seed);
        let mut a = Network::new(def, w.clone(), &dev).unwrap().with_pipeline_depth(1 + seed as usize % 4);
        let mut b = Network::new(seq_def, w, &dev).unwrap();
        let ra = a.forward(&x, &mut dev).unwrap();
        let rb = b.forward(&x, &mut dev).unwrap();
        prop_assert_eq!(ra.output.shape(), rb.output.shape());
        prop_assert!(compare_tensors(&ra.output, &rb.output).passed());
        prop_assert_eq!(ra.events.activation_host_to_device, 1);
        prop_assert_eq!(ra.events.activation_device_to_host, 1);
    }
}
