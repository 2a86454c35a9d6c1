"""Build the full-size configuration, run one forward pass and count parameters."""

from ihdnet.experiments import scale_sanity

if __name__ == "__main__":
    r = scale_sanity()
    print(f"intra-slice parameters {r.intra_params:,}; total {r.total_params:,}; "
          f"logits {r.logits_shape}; finite {r.finite}; {r.seconds:.1f}s")
