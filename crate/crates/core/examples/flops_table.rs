//! Analytic forward FLOPs and activated parameters as functions of `k`.

use smdk::eval::{activated_params, backbone_params, count_flops, flops_breakdown, router_params};
use smdk::nn::{Method, ModelConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let c = ModelConfig::tiny(Method::SmoeDropout);
    let s = c.seq_len;
    let b = flops_breakdown(&c, s);
    println!(
        "backbone {} params, routers {} params; per-expert {} FLOPs/token over {} MoE layers",
        backbone_params(&c),
        router_params(&c),
        b.per_expert,
        b.moe_layers
    );
    println!("k,activated_params,flops_per_token");
    for k in 1..=c.n_experts {
        println!("{k},{},{}", activated_params(&c, k), count_flops(&c, k, s));
    }
    let dense = c.with_method(Method::DenseDropout);
    println!("dense model: {} FLOPs/token", count_flops(&dense, c.n_experts, s));
    Ok(())
}
