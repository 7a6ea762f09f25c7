#!/usr/bin/env python3
"""
Example usage of the normtweak library.
Trains a toy byte-level model, quantizes it with GPTQ at 2 bits, and shows
what norm tweaking does to the per-layer activation divergence and perplexity.
"""

import os

import torch

from normtweak.core.logging import configure_logging
from normtweak.core.numerics import Rng
from normtweak.models.tokenizer import ByteTokenizer
from normtweak.models.transformer import ModelConfig, SamplingPolicy, init_model
from normtweak.services.calibration import CalibrationConfig, build_whitelist, generate_calibration
from normtweak.services.evaluation import continue_text, divergence_profile, perplexity
from normtweak.services.norm_tweaking import TweakConfig, tweak_model
from normtweak.services.quantization import QuantConfig, QuantMethod
from normtweak.services.training import TrainConfig, train_toy

SAMPLE_TEXT = (
    "the cat sees the ball. a dog follows the river. my friend likes some bread. "
    "the old man watches the garden. our neighbor helps a small bird. "
)


def main():
    """Demonstrate quantization with and without norm tweaking"""

    configure_logging(os.getenv("NORMTWEAK_LOG_LEVEL", "WARNING"))
    seed = int(os.getenv("NORMTWEAK_DEMO_SEED", "0"))
    rng = Rng(seed)
    tokenizer = ByteTokenizer()

    print("🚀 Training a toy float model...")

    try:
        corpus = tokenizer.encode(SAMPLE_TEXT * 60)
        held_out = tokenizer.encode(SAMPLE_TEXT[::-1] * 4)
        config = ModelConfig(vocab_size=256, hidden=64, n_layers=4, n_heads=4, max_seq_len=64)
        corpus_ids = torch.tensor(corpus)
        held_out_ids = torch.tensor(held_out)
        model = train_toy(
            init_model(config, rng.spawn("init")), corpus_ids, TrainConfig(steps=150, log_every=50), rng.spawn("train")
        ).model
        print(f"✅ Float model trained, held-out PPL {perplexity(model, held_out_ids).ppl:.3f}")

        # Example 1: self-generated calibration data
        print("\n📝 Example 1: Self-generated calibration data")
        print("-" * 50)
        calib_cfg = CalibrationConfig(n_samples=8, token_length=64, whitelist=build_whitelist(corpus, 0.9))
        calib = generate_calibration(model, calib_cfg, rng.spawn("gendata"))
        for ids in calib.sequences[:3]:
            print(f"  • {tokenizer.decode(ids)[:60]!r}")

        # Example 2: GPTQ with and without norm tweaking
        print("\n🎯 Example 2: W2 g64 GPTQ vs GPTQ + norm tweaking")
        print("-" * 50)
        qcfg = QuantConfig(bits=2, group_size=64)
        plain = tweak_model(model, QuantMethod.GPTQ, calib, qcfg, TweakConfig(iters=0)).model
        result = tweak_model(model, QuantMethod.GPTQ, calib, qcfg, TweakConfig(lr_0=1e-3))
        tweaked = result.model

        for name, candidate in (("float", model), ("gptq", plain), ("gptq+nt", tweaked)):
            print(f"  {name:<8} PPL {perplexity(candidate, held_out_ids).ppl:.3f}")
        report = result.report
        print(
            f"\nTweaking touched {report.norm_parameters_per_block} norm parameters per block "
            f"(vs {report.linear_parameters_per_block} Linear weights)"
        )

        # Example 3: per-layer divergence
        print("\n📊 Example 3: Per-layer channel-mean divergence")
        print("-" * 50)
        before = divergence_profile(model, plain, calib, ("float", "gptq"))
        after = divergence_profile(model, tweaked, calib, ("float", "gptq+nt"))
        for layer, (mu_plain, mu_tweaked) in enumerate(zip(before.delta_mu, after.delta_mu)):
            print(f"  layer {layer}: {mu_plain:.5f} -> {mu_tweaked:.5f}")

        # Example 4: text continuations
        print("\n💬 Example 4: Greedy continuations")
        print("-" * 50)
        outputs = continue_text(
            [("float", model), ("gptq", plain), ("gptq+nt", tweaked)], "the cat ", 40, SamplingPolicy.greedy(), rng
        )
        for name, text in outputs.items():
            print(f"  {name:<8} {text!r}")

        print("\n🎉 Demo completed successfully!")

    except Exception as e:
        print(f"❌ Error during demo: {str(e)}")
        print("\nTo run the demo, install requirements:")
        print("  pip install -r requirements.txt")


if __name__ == "__main__":
    main()
