"""Walk through the FC-DRN graph: widths, dense connectivity, parameter counts
and receptive fields for every variant."""
from fcdrn.builder import ChannelPlan, DENSE_TABLE, STAGES, build, count_parameters, describe, surgery_to_dilated
from fcdrn.receptive_field import compute_receptive_field


def show_topology():
    plan = ChannelPlan()
    print("stage widths:", plan.stage_widths)
    for i, row in enumerate(DENSE_TABLE):
        dest = STAGES[i + 1] if i < 8 else "FUB"
        parts = []
        for src, d, n in row:
            parts.append(src if d == "=" else f"{src}{'v' if d == 'd' else '^'}{n}")
        print(f"  -> {dest:<3} concat [{', '.join(parts)}] mixed to {plan.mixing_widths[i]}")


def show_counts():
    for v in ("P", "S", "D"):
        m = build(v, ChannelPlan(), seed=0)
        print(f"FC-DRN-{v:<3} {count_parameters(m):>10,} parameters")
    pd = surgery_to_dilated(build("P", ChannelPlan(), seed=0))
    print(f"FC-DRN-P-D {count_parameters(pd):>10,} parameters (after surgery)")


def show_receptive_fields():
    for v in ("P", "S", "D"):
        rf = compute_receptive_field(build(v, ChannelPlan(scale=0.25), blocks_per_stage=7))
        print(f"{v}: " + "  ".join(f"{k}={rf[k]['rf']}" for k in ("R1", "R5", "R9", "classifier")))


if __name__ == "__main__":
    show_topology()
    show_counts()
    show_receptive_fields()
    print()
    print("\n".join(describe(build("D", ChannelPlan(scale=0.25), blocks_per_stage=1)).splitlines()[:12]))
