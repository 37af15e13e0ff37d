/**
 * Track playback panel: per-frame patch image, a timeline scrubber with
 * explicit gap markers for frames without a valid patch, lineage chips
 * for walking to parent/daughter tracks, and channel/view controls.
 *
 * The panel owns no data fetching beyond patch image URLs; the caller
 * hands it a TrackDetail and listens for frame changes, so the scatter
 * highlight and the patch image always move from the same event.
 */

import { ApiClient, keyOf, MetaInfo, PointKey, TrackDetail } from "./api.js";
import { Emitter } from "./emitter.js";
import { trackExtent } from "./state.js";

export interface TrackPanelEvents {
	/** Fired whenever the playback frame changes (scrub, play, show). */
	frame: { t: number; key: PointKey; valid: boolean };
	/** Fired when a lineage chip is clicked. */
	selectTrack: { fovId: string; trackId: number };
}

/** Milliseconds per frame during playback. */
const PLAY_INTERVAL_MS = 250;

function el<K extends keyof HTMLElementTagNameMap>(
	tag: K,
	className = "",
	text = "",
): HTMLElementTagNameMap[K] {
	const node = document.createElement(tag);
	if (className) node.className = className;
	if (text) node.textContent = text;
	return node;
}

export class TrackPanel {
	#root: HTMLElement;
	#api: ApiClient;
	#emitter = new Emitter<TrackPanelEvents>();

	#track: TrackDetail | null = null;
	#validFrames = new Set<number>();
	#frame = 0;
	#channel = "";
	#view = "center_slice";
	#playTimer: ReturnType<typeof setInterval> | null = null;

	#title: HTMLElement;
	#lineage: HTMLElement;
	#image: HTMLImageElement;
	#gapNote: HTMLElement;
	#ticks: HTMLElement;
	#frameLabel: HTMLElement;
	#playButton: HTMLButtonElement;
	#channelSelect: HTMLSelectElement;
	#viewSelect: HTMLSelectElement;

	constructor(container: HTMLElement, api: ApiClient) {
		this.#api = api;
		this.#root = el("div", "track-panel");
		container.appendChild(this.#root);

		this.#title = el("div", "track-title", "no track selected");
		this.#lineage = el("div", "track-lineage");

		const viewer = el("div", "patch-viewer");
		this.#image = el("img", "patch-image");
		this.#image.alt = "cell patch";
		this.#image.addEventListener("error", () => this.#showGap(true));
		this.#gapNote = el("div", "patch-gap", "no patch at this frame");
		this.#gapNote.style.display = "none";
		viewer.append(this.#image, this.#gapNote);

		const controls = el("div", "patch-controls");
		this.#channelSelect = el("select", "channel-select");
		this.#channelSelect.addEventListener("change", () => {
			this.#channel = this.#channelSelect.value;
			this.#refreshImage();
		});
		this.#viewSelect = el("select", "view-select");
		this.#viewSelect.addEventListener("change", () => {
			this.#view = this.#viewSelect.value;
			this.#refreshImage();
		});
		this.#playButton = el("button", "play-button", "play");
		this.#playButton.addEventListener("click", () => this.togglePlay());
		controls.append(this.#channelSelect, this.#viewSelect, this.#playButton);

		const timeline = el("div", "timeline");
		this.#ticks = el("div", "timeline-ticks");
		this.#frameLabel = el("div", "frame-label");
		timeline.append(this.#ticks, this.#frameLabel);

		this.#root.append(this.#title, this.#lineage, viewer, controls, timeline);
	}

	on<K extends keyof TrackPanelEvents & string>(
		event: K,
		fn: (data: TrackPanelEvents[K]) => void,
	): () => void {
		return this.#emitter.on(event, fn);
	}

	get track(): TrackDetail | null {
		return this.#track;
	}

	get frame(): number {
		return this.#frame;
	}

	get playing(): boolean {
		return this.#playTimer !== null;
	}

	/** Load a track and jump to its first valid frame. */
	show(track: TrackDetail, meta: MetaInfo, channel: string, view: string): void {
		this.stop();
		this.#track = track;
		this.#validFrames = new Set(track.embedded_t);
		this.#channel = channel || meta.channels[0] || "";
		this.#view = view;

		this.#title.textContent =
			`track ${track.fov_id}/${track.track_id}` +
			` (${meta.conditions[track.fov_id] ?? "unknown"})`;

		this.#fillSelect(this.#channelSelect, meta.channels, this.#channel);
		this.#fillSelect(this.#viewSelect, meta.patch_views, this.#view);
		this.#buildLineage(track);
		this.#buildTicks(track);

		const start = track.embedded_t.length > 0
			? track.embedded_t[0]
			: trackExtent(track).first;
		this.setFrame(start);
	}

	/** Remove the current track from the panel. */
	clear(): void {
		this.stop();
		this.#track = null;
		this.#title.textContent = "no track selected";
		this.#lineage.replaceChildren();
		this.#ticks.replaceChildren();
		this.#frameLabel.textContent = "";
		this.#showGap(true);
	}

	/** Move playback to a frame (clamped to the track's extent). */
	setFrame(t: number): void {
		const track = this.#track;
		if (!track) return;
		const { first, last } = trackExtent(track);
		this.#frame = Math.min(last, Math.max(first, Math.round(t)));
		const valid = this.#validFrames.has(this.#frame);
		this.#refreshImage();
		this.#refreshTicks();
		this.#frameLabel.textContent = `frame ${this.#frame}`;
		this.#emitter.emit("frame", {
			t: this.#frame,
			key: keyOf(track.fov_id, track.track_id, this.#frame),
			valid,
		});
	}

	/** Advance to the next valid frame, wrapping at the end. */
	stepForward(): void {
		const track = this.#track;
		if (!track || track.embedded_t.length === 0) return;
		const frames = track.embedded_t;
		const next = frames.find((t) => t > this.#frame);
		this.setFrame(next ?? frames[0]);
	}

	togglePlay(): void {
		if (this.#playTimer !== null) {
			this.stop();
			return;
		}
		if (!this.#track || this.#track.embedded_t.length < 2) return;
		this.#playButton.textContent = "pause";
		this.#playTimer = setInterval(() => this.stepForward(), PLAY_INTERVAL_MS);
	}

	stop(): void {
		if (this.#playTimer !== null) {
			clearInterval(this.#playTimer);
			this.#playTimer = null;
		}
		this.#playButton.textContent = "play";
	}

	destroy(): void {
		this.stop();
		this.#emitter.clear();
		this.#root.remove();
	}

	#fillSelect(select: HTMLSelectElement, values: string[], current: string): void {
		select.replaceChildren();
		for (const value of values) {
			const option = el("option", "", value);
			option.value = value;
			option.selected = value === current;
			select.appendChild(option);
		}
	}

	#buildLineage(track: TrackDetail): void {
		this.#lineage.replaceChildren();
		const chip = (label: string, trackId: number) => {
			const button = el("button", "lineage-chip", label);
			button.addEventListener("click", () => {
				this.#emitter.emit("selectTrack", {
					fovId: track.fov_id,
					trackId,
				});
			});
			this.#lineage.appendChild(button);
		};
		if (track.parent_track_id !== null) {
			chip(`parent ${track.parent_track_id}`, track.parent_track_id);
		}
		for (const d of track.daughters) chip(`daughter ${d}`, d);
		if (track.daughters.length > 0) {
			this.#lineage.appendChild(
				el("span", "lineage-note", "track ends at division"),
			);
		}
	}

	#buildTicks(track: TrackDetail): void {
		this.#ticks.replaceChildren();
		const { first, last } = trackExtent(track);
		const tracked = new Set(track.nodes.map((n) => n.t));
		for (let t = first; t <= last; t++) {
			const tick = el("button", "tick");
			tick.dataset.t = String(t);
			tick.title = this.#validFrames.has(t)
				? `frame ${t}`
				: `frame ${t} (no patch)`;
			if (!this.#validFrames.has(t) || !tracked.has(t)) {
				tick.classList.add("gap");
			}
			tick.addEventListener("click", () => this.setFrame(t));
			this.#ticks.appendChild(tick);
		}
	}

	#refreshTicks(): void {
		for (const node of Array.from(this.#ticks.children)) {
			const tick = node as HTMLElement;
			tick.classList.toggle("active", Number(tick.dataset.t) === this.#frame);
		}
	}

	#refreshImage(): void {
		const track = this.#track;
		if (!track) return;
		if (!this.#validFrames.has(this.#frame)) {
			this.#showGap(true);
			return;
		}
		this.#showGap(false);
		this.#image.src = this.#api.patchUrl(
			track.fov_id,
			track.track_id,
			this.#frame,
			this.#channel,
			this.#view,
		);
	}

	#showGap(gap: boolean): void {
		this.#image.style.display = gap ? "none" : "block";
		this.#gapNote.style.display = gap ? "block" : "none";
	}
}
