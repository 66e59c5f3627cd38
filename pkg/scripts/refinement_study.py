"""Box counts of R, Rxi and Cxi for one scenario across resolutions.

    python3 scripts/refinement_study.py product-construction 16 32 64 128
"""
import sys
import time

from orbiflow import scenarios
from orbiflow.graph import build_graph, xi_recurrent_split


def main(name: str, resolutions: list[int]) -> None:
    sc = scenarios.builtin(name)
    p = sc.params
    print("res  boxes      R    Rxi    Cxi  closed  b      max_pairing  seconds")
    for res in resolutions:
        t0 = time.perf_counter()
        g = build_graph(sc.field, sc.cls, res, T_edge=p.T_edge, samples=p.samples, step=p.step)
        rep = xi_recurrent_split(g)
        dt = time.perf_counter() - t0
        print(f"{res:4d} {g.n_nodes:6d} {len(rep.R_boxes):6d} {len(rep.Rxi_boxes):6d} {len(rep.Cxi_boxes):6d}  "
              f"{str(rep.Cxi_closed):6s}  {str(rep.condition_b_holds):5s}  {str(rep.max_cycle_pairing):11.11s}  {dt:6.1f}")


if __name__ == "__main__":
    if len(sys.argv) < 3:
        sys.exit(__doc__)
    main(sys.argv[1], [int(r) for r in sys.argv[2:]])
