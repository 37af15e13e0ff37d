/**
 * Application assembly: fetch the dataset view over the HTTP API, mount
 * the scatter, annotation, and track panels, and keep them linked.
 *
 * Data flow is one-directional: server data and a ViewState value are
 * the only inputs to every render, user gestures produce new state via
 * the pure transitions in state.ts, and each transition triggers the
 * narrowest refresh that covers it (recolor, selection rings, playback
 * marker). Annotations apply optimistically and roll back if the server
 * rejects the post.
 */

import {
	AnnotationRecord,
	ApiClient,
	ApiError,
	describeErrors,
	keyOf,
	MetaInfo,
	PointKey,
	ProjectionPoint,
	TrackDetail,
} from "./api.js";
import { AnnotatePanel } from "./annotate.js";
import {
	COLOR_MODES,
	ColorMode,
	legendFor,
	makeColorContext,
	modeAvailability,
	pointColor,
} from "./color.js";
import { ScatterPlot, TrajectoryPoint } from "./scatter.js";
import {
	initialState,
	ViewState,
	withActiveTrack,
	withColorMode,
	withFrame,
	withSelection,
} from "./state.js";
import { TrackPanel } from "./trackpanel.js";

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

/** Index human annotations by label type, then by point key. */
function indexAnnotations(
	records: AnnotationRecord[],
): Map<string, Map<PointKey, number>> {
	const byType = new Map<string, Map<PointKey, number>>();
	for (const r of records) {
		let m = byType.get(r.label_type);
		if (!m) {
			m = new Map();
			byType.set(r.label_type, m);
		}
		m.set(keyOf(r.fov_id, r.track_id, r.t), r.value);
	}
	return byType;
}

export class App {
	readonly api: ApiClient;
	readonly meta: MetaInfo;
	readonly points: ProjectionPoint[];
	readonly loadedKeys: ReadonlySet<PointKey>;
	readonly scatter: ScatterPlot;
	readonly tracks: TrackPanel;
	readonly annotate: AnnotatePanel;

	#state: ViewState;
	#annotations: Map<string, Map<PointKey, number>>;
	#activeDetail: TrackDetail | null = null;
	#trajectory: TrajectoryPoint[] = [];
	#root: HTMLElement;
	#legend: HTMLElement;
	#colorSelect: HTMLSelectElement;

	constructor(
		root: HTMLElement,
		api: ApiClient,
		meta: MetaInfo,
		points: ProjectionPoint[],
		humanAnnotations: AnnotationRecord[],
	) {
		this.api = api;
		this.meta = meta;
		this.points = points;
		this.#root = root;
		this.#state = initialState(meta);
		this.#annotations = indexAnnotations(humanAnnotations);
		this.loadedKeys = new Set(
			points.map((p) => keyOf(p.fov_id, p.track_id, p.t)),
		);

		root.replaceChildren();
		const header = el("header", "app-header");
		header.appendChild(el("h1", "", "embedding explorer"));

		this.#colorSelect = el("select", "color-mode-select");
		for (const mode of COLOR_MODES) {
			const option = el("option", "", `color by ${mode}`);
			option.value = mode;
			const avail = modeAvailability(mode, meta);
			option.disabled = !avail.enabled;
			if (avail.reason) option.title = avail.reason;
			this.#colorSelect.appendChild(option);
		}
		this.#colorSelect.value = this.#state.colorBy;
		this.#colorSelect.addEventListener("change", () => {
			this.setColorBy(this.#colorSelect.value as ColorMode);
		});

		const panButton = el("button", "mode-pan", "pan/zoom");
		const lassoButton = el("button", "mode-lasso", "lasso");
		panButton.addEventListener("click", () => this.scatter.setMode("pan"));
		lassoButton.addEventListener("click", () => this.scatter.setMode("lasso"));

		const stats = el("span", "point-count", `${points.length} points`);
		header.append(this.#colorSelect, panButton, lassoButton, stats);

		const body = el("div", "app-body");
		const scatterPane = el("div", "scatter-pane");
		this.#legend = el("div", "legend");
		const sidebar = el("div", "sidebar");
		body.append(scatterPane, sidebar);
		root.append(header, body);

		this.scatter = new ScatterPlot(scatterPane, {});
		scatterPane.appendChild(this.#legend);
		this.annotate = new AnnotatePanel(sidebar, meta.label_types);
		this.tracks = new TrackPanel(sidebar, api);

		this.scatter.setPoints(
			points.map((p) => ({
				key: keyOf(p.fov_id, p.track_id, p.t),
				x: p.x,
				y: p.y,
			})),
		);

		this.scatter.on("lasso", ({ keys }) => {
			this.#state = withSelection(this.#state, keys, this.loadedKeys);
			this.scatter.setSelection(this.#state.selected);
			this.annotate.setSelectionCount(this.#state.selected.size);
		});
		this.scatter.on("pick", ({ key }) => {
			if (key === null) {
				this.closeTrack();
				return;
			}
			const [fovId, trackId] = key.split("|");
			void this.openTrack(fovId, Number(trackId));
		});

		this.annotate.on("apply", ({ labelType, value }) => {
			void this.applyAnnotation(labelType, value);
		});
		this.annotate.on("labelType", ({ labelType }) => {
			this.#state = { ...this.#state, labelType };
			this.recolor();
		});

		this.tracks.on("frame", ({ t, key }) => {
			if (this.#activeDetail) {
				this.#state = withFrame(this.#state, t, this.#activeDetail);
			}
			this.scatter.setTrajectory(this.#trajectory, key);
		});
		this.tracks.on("selectTrack", ({ fovId, trackId }) => {
			void this.openTrack(fovId, trackId);
		});

		this.recolor();
	}

	/** Current view state (immutable; transitions replace it). */
	get state(): ViewState {
		return this.#state;
	}

	/** Human annotation value per loaded point for one label type. */
	annotationsFor(labelType: string): ReadonlyMap<PointKey, number> {
		return this.#annotations.get(labelType) ?? new Map();
	}

	/** Recompute every point color from current data and state. */
	recolor(): void {
		const ctx = makeColorContext(
			this.points,
			this.#state.labelType,
			this.#annotations.get(this.#state.labelType) ?? new Map(),
		);
		const colors = this.points.map((p) =>
			pointColor(
				p,
				keyOf(p.fov_id, p.track_id, p.t),
				this.#state.colorBy,
				ctx,
			),
		);
		this.scatter.setColors(colors);
		this.#renderLegend(ctx);
	}

	setColorBy(mode: ColorMode): void {
		const avail = modeAvailability(mode, this.meta);
		this.#state = withColorMode(this.#state, mode, avail.enabled);
		this.#colorSelect.value = this.#state.colorBy;
		this.recolor();
	}

	/** Replace the selection programmatically (same path as the lasso). */
	selectKeys(keys: Iterable<PointKey>): void {
		this.#state = withSelection(this.#state, keys, this.loadedKeys);
		this.scatter.setSelection(this.#state.selected);
		this.annotate.setSelectionCount(this.#state.selected.size);
	}

	/** Load a track and start playback at its first valid frame. */
	async openTrack(fovId: string, trackId: number): Promise<TrackDetail> {
		const detail = await this.api.track(fovId, trackId);
		this.#activeDetail = detail;
		this.#state = withActiveTrack(this.#state, detail);
		this.#trajectory = this.points
			.filter((p) => p.fov_id === fovId && p.track_id === trackId)
			.sort((a, b) => a.t - b.t)
			.map((p) => ({
				key: keyOf(p.fov_id, p.track_id, p.t),
				x: p.x,
				y: p.y,
				t: p.t,
			}));
		this.tracks.show(detail, this.meta, this.#state.channel, this.#state.patchView);
		return detail;
	}

	closeTrack(): void {
		this.#activeDetail = null;
		this.#trajectory = [];
		this.#state = withActiveTrack(this.#state, null);
		this.tracks.clear();
		this.scatter.setTrajectory(null, null);
	}

	/**
	 * Annotate the current selection: apply locally, post, and roll the
	 * local state back if the server rejects the batch. Resolves true on
	 * success.
	 */
	async applyAnnotation(labelType: string, value: number): Promise<boolean> {
		const keys = Array.from(this.#state.selected);
		if (keys.length === 0) return false;

		let perType = this.#annotations.get(labelType);
		if (!perType) {
			perType = new Map();
			this.#annotations.set(labelType, perType);
		}
		const previous = new Map<PointKey, number | undefined>();
		for (const key of keys) {
			previous.set(key, perType.get(key));
			perType.set(key, value);
		}
		this.recolor();

		try {
			const written = await this.api.postAnnotations(
				keys.map((key) => ({ key, labelType, value })),
			);
			this.annotate.showStatus(`wrote ${written} annotation${written === 1 ? "" : "s"}`);
			return true;
		} catch (err) {
			for (const [key, old] of previous) {
				if (old === undefined) perType.delete(key);
				else perType.set(key, old);
			}
			this.recolor();
			if (err instanceof ApiError) {
				this.annotate.showErrors(describeErrors(err));
			} else {
				this.annotate.showErrors([String(err)]);
			}
			return false;
		}
	}

	destroy(): void {
		this.scatter.destroy();
		this.tracks.destroy();
		this.annotate.destroy();
		this.#root.replaceChildren();
	}

	#renderLegend(ctx: Parameters<typeof legendFor>[1]): void {
		this.#legend.replaceChildren();
		for (const entry of legendFor(this.#state.colorBy, ctx)) {
			const row = el("span", "legend-entry");
			const swatch = el("span", "legend-swatch");
			swatch.style.backgroundColor = entry.color;
			row.append(swatch, el("span", "", entry.label));
			this.#legend.appendChild(row);
		}
	}
}

/** Fetch everything the app needs and construct it. */
export async function createApp(root: HTMLElement, api: ApiClient): Promise<App> {
	root.replaceChildren(el("div", "loading", "loading dataset..."));
	const [meta, points, human] = await Promise.all([
		api.meta(),
		api.projection(),
		api.annotations({ source: "human" }),
	]);
	return new App(root, api, meta, points, human);
}

/**
 * Boot with a visible error state: on a failed load, show the reason and
 * a retry button, and try again when it is clicked.
 */
export async function boot(root: HTMLElement, api: ApiClient): Promise<App> {
	for (;;) {
		try {
			return await createApp(root, api);
		} catch (err) {
			root.replaceChildren();
			const panel = el("div", "error-panel");
			panel.appendChild(el("div", "error-message", `failed to load: ${String(err)}`));
			const retry = el("button", "retry-button", "retry");
			panel.appendChild(retry);
			root.appendChild(panel);
			await new Promise<void>((resolve) => {
				retry.addEventListener("click", () => resolve(), { once: true });
			});
		}
	}
}
