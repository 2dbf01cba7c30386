"""Parameter budgets on the reference backbone dimensions, as fractions of activated parameters."""

from perft.analysis import OLMOE_ACTIVATED_TOTAL, CountDims, count_params

dims = dict(L=16, D=2048, N=64, K=8, D_ffn=1024, ffn_form="glu", model_activated_total=OLMOE_ACTIVATED_TOTAL)
rows = [("baseline_qv", dict(D_B=r)) for r in (4, 16, 64)]
rows += [("perft_r", dict(M=4, K_tilde=1, D_B=d)) for d in (8, 32)]
rows += [("perft_s", dict(D_B=16)), ("perft_d", dict(M=4, D_B=16)), ("perft_e", dict(M=64, D_B=16))]

print(f"{'mode':<13}{'shape':<24}{'total':>11}{'activated':>11}{'share %':>9}")
for mode, kw in rows:
    rep = count_params(CountDims(**dims, **kw), mode)
    shape = " ".join(f"{k}={v}" for k, v in kw.items())
    print(f"{mode:<13}{shape:<24}{rep.trainable_total:>11,}{rep.trainable_activated_per_token:>11,}"
          f"{rep.activated_efficiency:>9.3f}")
