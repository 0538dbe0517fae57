"""Parameter counts, FLOP budget, MFU and cost for the standard presets."""
from mosaicbert import bench
from mosaicbert.layers import count_params, preset

rows = []
for name in ("bert-base", "mosaicbert-base", "bert-large", "mosaicbert-large"):
    cfg = preset(name)
    n = count_params(cfg)
    rows.append({
        "model": name,
        "params": f"{n:,}",
        "6P flops/token": f"{bench.flops_per_token(cfg):,}",
        "with attention (L=128)": f"{bench.flops_per_token(cfg, include_attention=True, seq_len=128):,}",
    })
print(bench.format_table(rows))

# 8 A100s at 312 TFLOP/s bf16 each
value = bench.mfu(110e6, 0.4e6, 8, bench.A100_BF16_PEAK)
print("MFU, 110M params at 400k tokens/s on 8 devices:", bench.format_percent(value))
print()

for hours in ("1.13", "2.81", "5.27"):
    print(f"{hours} h on 8 devices at $2.50/device-hour:", bench.format_money(bench.cost_estimate(hours, 8, "2.50")))
