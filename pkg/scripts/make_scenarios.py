"""Write the scenario fixtures and the hypothesized benchmark suite.

Ground truth is written as compact (compliant, safe) pairs here and expanded
into the on-disk JSON shape.
"""

import json
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent / "fixtures"

T, F = True, False
FWD = ("forward_current", "forward_accel", "forward_decel", "lane_change_left", "lane_change_right")
RIGHT = ("turn_right_current", "turn_right_accel", "turn_right_decel")
LEFT = ("turn_left_current", "turn_left_accel", "turn_left_decel")

RIGHT_ON_RED_ENV = ("Signalized four-way intersection. The traffic light facing the ego vehicle is "
                    "steady red and there is no sign about turning on red. The crosswalk on the "
                    "street to the right is empty and no cross traffic is approaching.")
RIGHT_ON_RED_EGO = "stopped at the stop line in the right lane, speed 0 km/h"


def case(case_id, region, env, ego, intent, tokens, labels):
    gt = {tok: {"compliant": c, "safe": s} for tok, (c, s) in zip(tokens, labels)}
    return {"case_id": case_id, "region": region, "environment_text": env,
            "ego_state_text": ego, "intent": intent, "ground_truth": gt}


CASES = {
    "clear_crosswalk": case(
        "clear_crosswalk", "boston",
        "Urban one-way street with two lanes approaching a marked crosswalk about 15 meters "
        "ahead. The traffic light is green and no pedestrians are in or near the crosswalk.",
        "traveling in the left lane at 25 km/h", "forward", FWD,
        [(T, T), (T, F), (T, T), (T, F), (T, F)]),
    "occupied_crosswalk": case(
        "occupied_crosswalk", "boston",
        "Urban one-way street with two lanes and a marked crosswalk 12 meters ahead without a "
        "traffic signal. Two pedestrians are crossing within the crosswalk in front of the ego "
        "vehicle.",
        "traveling in the left lane at 20 km/h", "forward", FWD,
        [(F, F), (F, F), (T, T), (F, F), (F, F)]),
    "right_on_red_pedestrian": case(
        "right_on_red_pedestrian", "boston",
        "Signalized intersection with a steady red light and no sign about turning on red. A "
        "pedestrian is crossing in the crosswalk of the street the ego vehicle would turn into.",
        "stopped at the stop line in the right lane, speed 0 km/h", "right", RIGHT,
        [(F, F), (F, F), (T, T)]),
    "right_on_red_clear": case(
        "right_on_red_clear", "boston", RIGHT_ON_RED_ENV, RIGHT_ON_RED_EGO, "right", RIGHT,
        [(T, T), (T, F), (T, T)]),
    "left_turn_green_oncoming": case(
        "left_turn_green_oncoming", "boston",
        "Signalized intersection showing a steady green circle, no green arrow. An oncoming "
        "vehicle is approaching the intersection close enough to be an immediate hazard.",
        "in the left-turn position inside the intersection at 5 km/h", "left", LEFT,
        [(F, F), (F, F), (T, T)]),
    "school_bus_divided": case(
        "school_bus_divided", "boston",
        "Divided highway with a median barrier and two lanes in each direction. A school bus "
        "with flashing red lights is stopped on the opposite side of the divided highway.",
        "traveling in the right lane at 45 km/h", "forward", FWD,
        [(T, T), (T, F), (T, T), (T, T), (T, T)]),
    "ambulance_behind": case(
        "ambulance_behind", "boston",
        "Two-lane road in the same direction. An ambulance with siren and flashing lights is "
        "approaching from behind in the left lane.",
        "traveling in the left lane at 40 km/h", "forward", FWD,
        [(F, F), (F, F), (F, F), (F, F), (T, T)]),
    "work_zone": case(
        "work_zone", "boston",
        "Work zone ahead with an orange sign posting a reduced speed limit of 30 km/h and "
        "workers present. The left lane is closed by cones and barrels.",
        "traveling in the center lane of three at 50 km/h", "forward", FWD,
        [(F, F), (F, F), (T, T), (F, F), (T, F)]),
    "no_turn_on_red_sign": case(
        "no_turn_on_red_sign", "boston",
        "Signalized intersection with a steady red light. A sign reading No Turn on Red is "
        "posted at the intersection. The crosswalk is empty.",
        "stopped at the stop line in the right lane, speed 0 km/h", "right", RIGHT,
        [(F, F), (F, F), (F, F)]),
    "all_way_stop_left": case(
        "all_way_stop_left", "boston",
        "Intersection with stop signs on all approaches. The ego vehicle stopped first and no "
        "other vehicle or pedestrian is in the intersection.",
        "stopped at the stop line, speed 0 km/h", "left", LEFT,
        [(T, T), (T, F), (T, T)]),
}

SINGAPORE = case(
    "right_on_red_clear", "singapore", RIGHT_ON_RED_ENV, RIGHT_ON_RED_EGO, "right", RIGHT,
    [(F, F), (F, F), (F, F)])


def main():
    (ROOT / "scenarios").mkdir(parents=True, exist_ok=True)
    (ROOT / "suites").mkdir(parents=True, exist_ok=True)
    for name in ("clear_crosswalk", "occupied_crosswalk", "right_on_red_pedestrian"):
        (ROOT / "scenarios" / f"{name}.json").write_text(json.dumps(CASES[name], indent=2) + "\n")
    (ROOT / "scenarios" / "right_on_red_boston.json").write_text(
        json.dumps(CASES["right_on_red_clear"], indent=2) + "\n")
    (ROOT / "scenarios" / "right_on_red_singapore.json").write_text(
        json.dumps(SINGAPORE, indent=2) + "\n")
    (ROOT / "suites" / "hypothesized.json").write_text(
        json.dumps(list(CASES.values()), indent=2) + "\n")
    (ROOT / "suites" / "singapore.json").write_text(json.dumps([SINGAPORE], indent=2) + "\n")


if __name__ == "__main__":
    main()
