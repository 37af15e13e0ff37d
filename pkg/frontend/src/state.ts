/**
 * View state and its transitions.
 *
 * The rendered UI is a function of (server data, ViewState); every
 * transition here is a pure function returning a new state object, which
 * keeps the invariants checkable in isolation: selected keys are always a
 * subset of the loaded keys, and the playback frame always lies within
 * the active track's extent.
 */

import type { MetaInfo, PointKey, TrackDetail } from "./api.js";
import type { ColorMode } from "./color.js";

export interface ViewState {
	/** Active point-coloring mode. */
	colorBy: ColorMode;
	/** Lasso-selected point keys; always a subset of the loaded keys. */
	selected: ReadonlySet<PointKey>;
	/** Track under playback, or null. */
	activeTrack: { fovId: string; trackId: number } | null;
	/** Playback frame; meaningful only while a track is active. */
	frame: number;
	/** Label type used for annotating and for annotation coloring. */
	labelType: string;
	/** Patch render style. */
	patchView: string;
	/** Patch channel. */
	channel: string;
}

/** Starting state for a freshly loaded dataset. */
export function initialState(meta: MetaInfo): ViewState {
	return {
		colorBy: "time",
		selected: new Set(),
		activeTrack: null,
		frame: 0,
		labelType: meta.label_types[0] ?? "infection",
		patchView: meta.patch_views[0] ?? "center_slice",
		channel: meta.channels[0] ?? "",
	};
}

/** Replace the selection, dropping any key that is not loaded. */
export function withSelection(
	state: ViewState,
	keys: Iterable<PointKey>,
	loaded: ReadonlySet<PointKey>,
): ViewState {
	const selected = new Set<PointKey>();
	for (const key of keys) {
		if (loaded.has(key)) selected.add(key);
	}
	return { ...state, selected };
}

/** Switch color mode; unknown or unavailable modes leave state unchanged. */
export function withColorMode(
	state: ViewState,
	mode: ColorMode,
	enabled: boolean,
): ViewState {
	if (!enabled) return state;
	return { ...state, colorBy: mode };
}

/** First frame to show for a track: its first embedded frame if any. */
export function startFrame(track: TrackDetail): number {
	if (track.embedded_t.length > 0) return track.embedded_t[0];
	return track.nodes[0]?.t ?? 0;
}

/** Activate a track (or clear with null), resetting the playback frame. */
export function withActiveTrack(
	state: ViewState,
	track: TrackDetail | null,
): ViewState {
	if (track === null) return { ...state, activeTrack: null, frame: 0 };
	return {
		...state,
		activeTrack: { fovId: track.fov_id, trackId: track.track_id },
		frame: startFrame(track),
	};
}

/** Inclusive frame extent of a track. */
export function trackExtent(track: TrackDetail): { first: number; last: number } {
	const ts = track.nodes.map((n) => n.t);
	return { first: Math.min(...ts), last: Math.max(...ts) };
}

/** Move the playback frame, clamped to the active track's extent. */
export function withFrame(
	state: ViewState,
	frame: number,
	track: TrackDetail,
): ViewState {
	const { first, last } = trackExtent(track);
	const clamped = Math.min(last, Math.max(first, Math.round(frame)));
	return { ...state, frame: clamped };
}
