use dermres_core::preprocess::resize_bicubic_to;
use dermres_core::Tensor;
use serde_json::Value;

fn case(v: &Value) -> (Tensor<f64>, Vec<usize>, Vec<f64>) {
    let dims = |k: &str| v[k].as_array().unwrap().iter().map(|x| x.as_u64().unwrap() as usize).collect::<Vec<_>>();
    let vals = |k: &str| v[k].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect::<Vec<_>>();
    (Tensor::from_vec(&dims("in_shape"), vals("input")).unwrap(), dims("out_shape"), vals("output"))
}

fn check(name: &str, tol: f64) {
    let golden: Value = serde_json::from_str(include_str!("data/bicubic_golden.json")).unwrap();
    let (input, out_shape, want) = case(&golden[name]);
    let got = resize_bicubic_to(&input, out_shape[1], out_shape[2]).unwrap();
    assert_eq!(got.shape(), &out_shape[..]);
    let worst = got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst <= tol, "{name}: max deviation {worst}");
}

#[test]
fn upscale_matches_pillow_float_bicubic() {
    check("up", 1e-4);
}

#[test]
fn downscale_matches_direct_evaluation() {
    check("down", 1e-9);
}

#[test]
fn f32_path_agrees() {
    let golden: Value = serde_json::from_str(include_str!("data/bicubic_golden.json")).unwrap();
    let (input, out_shape, want) = case(&golden["up"]);
    let got = resize_bicubic_to(&input.cast::<f32>(), out_shape[1], out_shape[2]).unwrap();
    for (a, b) in got.data().iter().zip(&want) {
        assert!((*a as f64 - b).abs() < 1e-2);
    }
}
