"""Regenerate the chain fixtures: five vehicles 20 m apart cruising at 10 m/s in lane 1.

Run from this directory. ``three_rows.csv`` is written by hand and not produced here.
"""

import csv

HEADER = ["Vehicle_ID", "Frame_ID", "Total_Frames", "Lane_ID", "Local_Y", "v_Vel", "v_Acc",
          "Preceding", "Space_Headway"]


def write(path, n_vehicles, seconds, lane_of=lambda vid, t: 1):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HEADER)
        n_frames = int(round(seconds * 10)) + 1
        for vid in range(1, n_vehicles + 1):
            for f in range(n_frames):
                t = f / 10
                y = 500.0 - 20.0 * (vid - 1) + 10.0 * t
                w.writerow([vid, f, n_frames, lane_of(vid, t), f"{y:.1f}", "10.0", "0.0",
                            vid - 1, "20.0" if vid > 1 else "0.0"])


write("chain5_25s.csv", 5, 25.0)
write("chain5_lane_change.csv", 5, 25.0, lambda vid, t: 2 if vid == 3 and t >= 10.0 else 1)
write("chain2_25s.csv", 2, 25.0)
