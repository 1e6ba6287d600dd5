use spectral_cmm::cmm::{fit_minimax_factored, CmmFit};
use spectral_cmm::contrastive::{ModelDoc, SpectralModel};
use spectral_cmm::datagen::{load_dataset, Split};
use spectral_cmm::kernels::{build_kx, build_kz, Kernel};

fn main() {
    let ds = load_dataset(std::path::Path::new("/tmp/smoke/ds")).unwrap();
    let doc: ModelDoc = serde_json::from_str(&std::fs::read_to_string("/tmp/smoke/model/model.json").unwrap()).unwrap();
    let model = SpectralModel::from_doc(&doc).unwrap();
    let x = ds.x_split(Split::Estimation);
    let z = ds.z_split(Split::Estimation);
    let y = ds.y_split(Split::Estimation).to_owned();
    let truth = ds.row_target(Split::Test).unwrap();
    let kx = build_kx(&model, 1.0).unwrap();
    let kz = build_kz(&model, 2.0).unwrap();
    let bx = kx.half_features(x).unwrap();
    let cz = kz.half_features(z).unwrap();
    for (lam, nu) in [(0.375, 1.5), (0.015, 0.375), (1e-4, 1e-3), (1e-6, 1e-5)] {
        let gf = fit_minimax_factored(bx.view(), cz.view(), y.view(), lam, nu).unwrap();
        let fit = CmmFit {
            gamma: gf.gamma.clone(),
            anchors: x.to_owned(),
            kernel_x: Kernel::Learned(kx.clone()),
            lambda: lam, nu,
            diagnostics: gf.diagnostics.clone(),
        };
        let preds = fit.predict(ds.x_split(Split::Test)).unwrap();
        let mse = (&preds - &truth).mapv(|v| v * v).mean().unwrap();
        let pvar = {
            let m = preds.mean().unwrap();
            preds.mapv(|v| (v - m) * (v - m)).mean().unwrap()
        };
        println!(
            "lam {lam:.1e} nu {nu:.1e}: mse {mse:.4} pred_var {pvar:.4} |f|_H^2 {:.4e} saddle {:.3e}",
            gf.diagnostics.f_sq_norm, gf.diagnostics.saddle_value
        );
    }
    let tvar = { let m = truth.mean().unwrap(); truth.mapv(|v| (v-m)*(v-m)).mean().unwrap() };
    println!("truth var {tvar:.4}");
}
