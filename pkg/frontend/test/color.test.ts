import { describe, expect, it } from "vitest";
import type { MetaInfo, ProjectionPoint } from "../src/api.js";
import { keyOf } from "../src/api.js";
import {
	CLASS_COLORS,
	colorRamp,
	legendFor,
	makeColorContext,
	modeAvailability,
	NEUTRAL,
	pointColor,
} from "../src/color.js";

function point(overrides: Partial<ProjectionPoint> = {}): ProjectionPoint {
	return {
		fov_id: "A1",
		track_id: 1,
		t: 0,
		x: 0,
		y: 0,
		hpi_minutes: 0,
		condition: "mock",
		predicted_label: null,
		probability: null,
		...overrides,
	};
}

function meta(overrides: Partial<MetaInfo> = {}): MetaInfo {
	return {
		channels: ["phase"],
		dt_minutes: 30,
		fov_ids: ["A1"],
		volume_shape: [1, 5, 32, 32],
		n_timepoints: 4,
		conditions: { A1: "mock" },
		t0_hpi_minutes: 0,
		n_nodes: 4,
		n_embedded: 4,
		label_types: ["infection", "division"],
		projection_methods: ["pca"],
		patch_views: ["center_slice", "max_proj"],
		has_predictions: false,
		model_checksum: "",
		...overrides,
	};
}

describe("colorRamp", () => {
	it("hits the ramp endpoints and clamps outside [0, 1]", () => {
		expect(colorRamp(0)).toBe("rgb(68,1,84)");
		expect(colorRamp(1)).toBe("rgb(253,231,37)");
		expect(colorRamp(-5)).toBe(colorRamp(0));
		expect(colorRamp(7)).toBe(colorRamp(1));
	});

	it("interpolates monotonically in green towards the hot end", () => {
		const greens = [0, 0.25, 0.5, 0.75, 1].map((t) => {
			const m = colorRamp(t).match(/rgb\(\d+,(\d+),/);
			return Number(m![1]);
		});
		for (let i = 1; i < greens.length; i++) {
			expect(greens[i]).toBeGreaterThanOrEqual(greens[i - 1]);
		}
	});
});

describe("pointColor", () => {
	it("colors by normalized time in time mode", () => {
		const pts = [
			point({ t: 0, hpi_minutes: 0 }),
			point({ t: 1, hpi_minutes: 30 }),
			point({ t: 2, hpi_minutes: 60 }),
		];
		const ctx = makeColorContext(pts, "infection", new Map());
		expect(pointColor(pts[0], "k0", "time", ctx)).toBe(colorRamp(0));
		expect(pointColor(pts[1], "k1", "time", ctx)).toBe(colorRamp(0.5));
		expect(pointColor(pts[2], "k2", "time", ctx)).toBe(colorRamp(1));
	});

	it("assigns stable palette slots per sorted condition name", () => {
		const pts = [
			point({ condition: "infected" }),
			point({ condition: "mock" }),
		];
		const ctx = makeColorContext(pts, "infection", new Map());
		const a = pointColor(pts[0], "a", "condition", ctx);
		const b = pointColor(pts[1], "b", "condition", ctx);
		expect(a).not.toBe(b);
		// Same data in another order gives the same assignment.
		const ctx2 = makeColorContext([pts[1], pts[0]], "infection", new Map());
		expect(pointColor(pts[0], "a", "condition", ctx2)).toBe(a);
		expect(pointColor(pts[1], "b", "condition", ctx2)).toBe(b);
	});

	it("colors annotated points by class and the rest neutral", () => {
		const p = point();
		const key = keyOf(p.fov_id, p.track_id, p.t);
		const labels = new Map([[key, 1]]);
		const ctx = makeColorContext([p], "infection", labels);
		expect(pointColor(p, key, "annotation", ctx)).toBe(CLASS_COLORS[1]);
		expect(pointColor(p, "other", "annotation", ctx)).toBe(NEUTRAL);
	});

	it("colors predictions by class and missing predictions neutral", () => {
		const yes = point({ predicted_label: 1, probability: 0.9 });
		const no = point({ predicted_label: 0, probability: 0.1 });
		const none = point();
		const ctx = makeColorContext([yes, no, none], "infection", new Map());
		expect(pointColor(yes, "a", "prediction", ctx)).toBe(CLASS_COLORS[1]);
		expect(pointColor(no, "b", "prediction", ctx)).toBe(CLASS_COLORS[0]);
		expect(pointColor(none, "c", "prediction", ctx)).toBe(NEUTRAL);
	});
});

describe("legendFor", () => {
	it("matches the condition assignment used by pointColor", () => {
		const pts = [
			point({ condition: "mock" }),
			point({ condition: "infected" }),
		];
		const ctx = makeColorContext(pts, "infection", new Map());
		const legend = legendFor("condition", ctx);
		expect(legend.map((e) => e.label)).toEqual(["infected", "mock"]);
		for (const entry of legend) {
			const p = pts.find((q) => q.condition === entry.label)!;
			expect(pointColor(p, "x", "condition", ctx)).toBe(entry.color);
		}
	});

	it("names the annotation label type in annotation mode", () => {
		const ctx = makeColorContext([point()], "division", new Map());
		const labels = legendFor("annotation", ctx).map((e) => e.label);
		expect(labels).toContain("division = 0");
		expect(labels).toContain("division = 1");
		expect(labels).toContain("unlabeled");
	});
});

describe("modeAvailability", () => {
	it("disables prediction mode without predictions and explains why", () => {
		const off = modeAvailability("prediction", meta({ has_predictions: false }));
		expect(off.enabled).toBe(false);
		expect(off.reason).toMatch(/predictions/);
		const on = modeAvailability("prediction", meta({ has_predictions: true }));
		expect(on.enabled).toBe(true);
	});

	it("always offers time, condition, and annotation", () => {
		for (const mode of ["time", "condition", "annotation"] as const) {
			expect(modeAvailability(mode, meta()).enabled).toBe(true);
		}
	});
});
