#!/usr/bin/env python3
"""Logit parity between protogap and transformers on tiny random models.

Builds a randomly initialised GPT-2 and Llama (GQA, rotary, RMSNorm, SwiGLU),
writes them in the protogap container format plus a golden logits file, then
runs `protogap evaluate --golden`. Exits 77 when torch/transformers are missing.
"""

import argparse
import json
import struct
import subprocess
import sys
import tempfile
from pathlib import Path

try:
    import numpy as np
    import torch
    import transformers
except ImportError as exc:
    print(f"SKIP hf-parity: {exc}")
    sys.exit(77)


def write_container(path, config, tensors):
    header = {"config": config}
    payload = bytearray()
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        header[name] = {"dtype": "f32", "shape": list(arr.shape), "offset": len(payload), "length": arr.nbytes}
        payload += arr.tobytes()
    text = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(text)))
        f.write(text)
        f.write(payload)


def t(x):
    return x.detach().to(torch.float32).numpy()


def gpt2_model(seed):
    torch.manual_seed(seed)
    cfg = transformers.GPT2Config(n_layer=3, n_embd=32, n_head=4, n_positions=64, vocab_size=97,
                                  layer_norm_epsilon=1e-5, activation_function="gelu_new",
                                  bos_token_id=0, eos_token_id=0)
    model = transformers.GPT2LMHeadModel(cfg).eval()
    config = {
        "n_layers": 3, "d_model": 32, "n_heads": 4, "n_kv_heads": 4, "d_ff": 128, "vocab_size": 97,
        "pe_type": "absolute", "norm_kind": "layernorm", "activation": "gelu_tanh", "max_position": 64,
        "tied_lm_head": True, "norm_eps": 1e-5,
    }
    tr = model.transformer
    tensors = [("tok_embed", t(tr.wte.weight)), ("pos_embed", t(tr.wpe.weight)),
               ("final_norm.gain", t(tr.ln_f.weight)), ("final_norm.bias", t(tr.ln_f.bias))]
    for i, h in enumerate(tr.h):
        w, b = t(h.attn.c_attn.weight), t(h.attn.c_attn.bias)
        p = f"layers.{i}."
        tensors += [
            (p + "attn_norm.gain", t(h.ln_1.weight)), (p + "attn_norm.bias", t(h.ln_1.bias)),
            (p + "Wq", w[:, :32]), (p + "Wk", w[:, 32:64]), (p + "Wv", w[:, 64:]),
            (p + "Wo", t(h.attn.c_proj.weight)),
            (p + "bq", b[:32]), (p + "bk", b[32:64]), (p + "bv", b[64:]), (p + "bo", t(h.attn.c_proj.bias)),
            (p + "mlp_norm.gain", t(h.ln_2.weight)), (p + "mlp_norm.bias", t(h.ln_2.bias)),
            (p + "W_up", t(h.mlp.c_fc.weight)), (p + "W_down", t(h.mlp.c_proj.weight)),
            (p + "b_up", t(h.mlp.c_fc.bias)), (p + "b_down", t(h.mlp.c_proj.bias)),
        ]
    return model, config, tensors


def llama_model(seed):
    torch.manual_seed(seed)
    cfg = transformers.LlamaConfig(num_hidden_layers=3, hidden_size=32, num_attention_heads=4,
                                   num_key_value_heads=2, intermediate_size=48, vocab_size=89,
                                   max_position_embeddings=64, rms_norm_eps=1e-6, rope_theta=10000.0,
                                   tie_word_embeddings=False, attention_bias=False)
    model = transformers.LlamaForCausalLM(cfg).eval()
    config = {
        "n_layers": 3, "d_model": 32, "n_heads": 4, "n_kv_heads": 2, "d_ff": 48, "vocab_size": 89,
        "pe_type": "rotary", "norm_kind": "rmsnorm", "activation": "silu", "max_position": 64,
        "tied_lm_head": False, "norm_eps": 1e-6, "rope_theta": 10000.0, "mlp_gated": True,
        "qkv_bias": False, "out_bias": False, "mlp_bias": False,
    }
    m = model.model
    tensors = [("tok_embed", t(m.embed_tokens.weight)), ("final_norm.gain", t(m.norm.weight)),
               ("lm_head", t(model.lm_head.weight).T)]
    for i, layer in enumerate(m.layers):
        a, f = layer.self_attn, layer.mlp
        p = f"layers.{i}."
        tensors += [
            (p + "attn_norm.gain", t(layer.input_layernorm.weight)),
            (p + "Wq", t(a.q_proj.weight).T), (p + "Wk", t(a.k_proj.weight).T),
            (p + "Wv", t(a.v_proj.weight).T), (p + "Wo", t(a.o_proj.weight).T),
            (p + "mlp_norm.gain", t(layer.post_attention_layernorm.weight)),
            (p + "W_gate", t(f.gate_proj.weight).T), (p + "W_up", t(f.up_proj.weight).T),
            (p + "W_down", t(f.down_proj.weight).T),
        ]
    # Random init leaves norm gains at 1; perturb them so the gains are exercised.
    rng = np.random.default_rng(seed)
    tensors = [(n, a + rng.normal(0, 0.1, a.shape).astype(np.float32) if n.endswith(".gain") else a)
               for n, a in tensors]
    with torch.no_grad():
        named = dict(tensors)
        m.norm.weight.copy_(torch.from_numpy(named["final_norm.gain"]))
        for i, layer in enumerate(m.layers):
            layer.input_layernorm.weight.copy_(torch.from_numpy(named[f"layers.{i}.attn_norm.gain"]))
            layer.post_attention_layernorm.weight.copy_(torch.from_numpy(named[f"layers.{i}.mlp_norm.gain"]))
    return model, config, tensors


def golden(model, vocab, seed, sequences=3, length=24):
    g = torch.Generator().manual_seed(seed)
    out = []
    for _ in range(sequences):
        ids = torch.randint(0, vocab, (1, length), generator=g)
        with torch.no_grad():
            logits = model(ids).logits[0]
        out.append({"tokens": ids[0].tolist(), "logits": logits.tolist()})
    return {"sequences": out}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--protogap", required=True)
    ap.add_argument("--tol", type=float, default=1e-4)
    args = ap.parse_args()
    failed = False
    with tempfile.TemporaryDirectory() as tmp:
        for name, build in (("gpt2", gpt2_model), ("llama", llama_model)):
            model, config, tensors = build(3)
            ck = Path(tmp) / f"{name}.ckpt"
            gold = Path(tmp) / f"{name}.golden.json"
            write_container(ck, config, tensors)
            gold.write_text(json.dumps(golden(model, config["vocab_size"], 7)))
            r = subprocess.run([args.protogap, "evaluate", "--checkpoint", str(ck), "--golden", str(gold),
                                "--golden-tol", str(args.tol), "--out", tmp],
                               capture_output=True, text=True)
            status = "PASS" if r.returncode == 0 else "FAIL"
            failed |= r.returncode != 0
            print(f"{status} hf-parity-{name}: {r.stdout.strip().splitlines()[0] if r.stdout else ''} {r.stderr.strip()}")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
