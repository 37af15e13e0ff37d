import { describe, expect, it } from "vitest";
import type { MetaInfo, TrackDetail } from "../src/api.js";
import {
	initialState,
	startFrame,
	trackExtent,
	withActiveTrack,
	withColorMode,
	withFrame,
	withSelection,
} from "../src/state.js";

const META: MetaInfo = {
	channels: ["phase", "rfp"],
	dt_minutes: 30,
	fov_ids: ["A1"],
	volume_shape: [2, 5, 32, 32],
	n_timepoints: 8,
	conditions: { A1: "mock" },
	t0_hpi_minutes: 0,
	n_nodes: 10,
	n_embedded: 8,
	label_types: ["infection", "division"],
	projection_methods: ["pca"],
	patch_views: ["center_slice", "max_proj"],
	has_predictions: false,
	model_checksum: "",
};

function track(ts: number[], embedded: number[]): TrackDetail {
	return {
		fov_id: "A1",
		track_id: 3,
		parent_track_id: null,
		daughters: [],
		nodes: ts.map((t) => ({ t, z: 0, y: 0, x: 0 })),
		embedded_t: embedded,
		annotations: [],
		predictions: [],
	};
}

describe("initialState", () => {
	it("starts from the dataset's own vocabulary", () => {
		const s = initialState(META);
		expect(s.colorBy).toBe("time");
		expect(s.selected.size).toBe(0);
		expect(s.labelType).toBe("infection");
		expect(s.channel).toBe("phase");
		expect(s.patchView).toBe("center_slice");
		expect(s.activeTrack).toBeNull();
	});
});

describe("withSelection", () => {
	it("keeps only loaded keys", () => {
		const loaded = new Set(["a", "b", "c"]);
		const s = withSelection(initialState(META), ["a", "nope", "c"], loaded);
		expect(Array.from(s.selected).sort()).toEqual(["a", "c"]);
	});

	it("does not mutate the previous state", () => {
		const s0 = initialState(META);
		withSelection(s0, ["a"], new Set(["a"]));
		expect(s0.selected.size).toBe(0);
	});
});

describe("withColorMode", () => {
	it("applies enabled modes and ignores disabled ones", () => {
		const s0 = initialState(META);
		expect(withColorMode(s0, "condition", true).colorBy).toBe("condition");
		expect(withColorMode(s0, "prediction", false).colorBy).toBe("time");
	});
});

describe("track activation and playback", () => {
	it("starts at the first embedded frame", () => {
		const tr = track([2, 3, 4, 5], [3, 4]);
		expect(startFrame(tr)).toBe(3);
		const s = withActiveTrack(initialState(META), tr);
		expect(s.activeTrack).toEqual({ fovId: "A1", trackId: 3 });
		expect(s.frame).toBe(3);
	});

	it("falls back to the first node when nothing is embedded", () => {
		expect(startFrame(track([4, 5], []))).toBe(4);
	});

	it("clamps the frame to the track extent", () => {
		const tr = track([2, 3, 4, 5], [2, 3, 4, 5]);
		const s0 = withActiveTrack(initialState(META), tr);
		expect(withFrame(s0, 99, tr).frame).toBe(5);
		expect(withFrame(s0, -4, tr).frame).toBe(2);
		expect(withFrame(s0, 3.4, tr).frame).toBe(3);
		expect(trackExtent(tr)).toEqual({ first: 2, last: 5 });
	});

	it("clears playback state with a null track", () => {
		const s = withActiveTrack(initialState(META), track([0, 1], [0, 1]));
		const cleared = withActiveTrack(s, null);
		expect(cleared.activeTrack).toBeNull();
		expect(cleared.frame).toBe(0);
	});
});
